//! Checkpoint archive: a plain-text header followed by raw little-endian
//! `f64` payload.
//!
//! ```text
//! cryoprompt-archive 1
//! meta <key> <value>
//! tensor <name> <trainable 0|1> <dims, e.g. 16x64> <byte offset into payload>
//! end
//! <payload>
//! ```
//!
//! Tensors appear in store insertion order and the payload holds them back to
//! back in the same order.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tensor};

const MAGIC: &str = "cryoprompt-archive 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: IndexMap<String, String>,
    pub store: ParameterStore,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Config(format!("archive {kind} `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

impl Archive {
    pub fn new(store: ParameterStore) -> Self {
        Archive {
            meta: IndexMap::new(),
            store,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::Config(format!("meta value for `{k}` contains a newline")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, e) in self.store.iter() {
            check_token("tensor name", name)?;
            let dims: Vec<String> = e.value.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!(
                "tensor {name} {} {} {offset}\n",
                u8::from(e.trainable),
                dims.join("x")
            ));
            offset += e.value.len() * 8;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, e) in self.store.iter() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format(path, detail);
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("header ends without `end` line".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8".into()))?;
            pos += nl + 1;
            Ok(line.to_string())
        };
        if next_line()? != MAGIC {
            return Err(bad("missing archive magic line".into()));
        }
        let mut meta = IndexMap::new();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    if parts.len() != 4 {
                        return Err(bad(format!("bad tensor line `{line}`")));
                    }
                    let trainable = match parts[1] {
                        "0" => false,
                        "1" => true,
                        other => return Err(bad(format!("bad trainable flag `{other}`"))),
                    };
                    let shape = parts[2]
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape `{}`", parts[2])))?;
                    let offset: usize = parts[3].parse().map_err(|_| bad(format!("bad offset `{}`", parts[3])))?;
                    entries.push((parts[0].to_string(), trainable, shape, offset));
                }
                other => return Err(bad(format!("unknown header line kind `{other}`"))),
            }
        }
        let payload = &bytes[pos..];
        let mut store = ParameterStore::new();
        let mut expected_offset = 0;
        for (name, trainable, shape, offset) in entries {
            if offset != expected_offset {
                return Err(bad(format!("tensor `{name}` offset {offset}, expected {expected_offset}")));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > payload.len() {
                return Err(bad(format!("payload truncated inside `{name}`")));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(name, Tensor::new(&shape, data)?, trainable)?;
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(bad(format!(
                "{} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(Archive { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        let mut s = ParameterStore::new();
        s.insert("a/w", Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap(), false)
            .unwrap();
        s.insert("b", Tensor::scalar(0.1), true).unwrap();
        let mut a = Archive::new(s);
        a.meta.insert("kind".into(), "prefix".into());
        a.meta.insert("depths".into(), "3,4".into());
        a
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(a.meta, b.meta);
        for ((n1, e1), (n2, e2)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(e1.trainable, e2.trainable);
            assert!(e1.value.bit_eq(&e2.value));
        }
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("cryoprompt-archive 1\nmeta kind prefix\nmeta depths 3,4\ntensor a/w 0 2x3 0\ntensor b 1 1 48\nend\n"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Archive::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn names_with_spaces_are_rejected() {
        let mut s = ParameterStore::new();
        s.insert("bad name", Tensor::scalar(1.0), true).unwrap();
        assert!(Archive::new(s).to_bytes().is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bits_roundtrip(bits in proptest::collection::vec(any::<u64>(), 1..40)) {
            let data: Vec<f64> = bits.iter().map(|b| f64::from_bits(*b)).collect();
            let mut s = ParameterStore::new();
            s.insert("t", Tensor::new(&[data.len()], data).unwrap(), true).unwrap();
            let a = Archive::new(s);
            let b = Archive::from_bytes(&a.to_bytes().unwrap(), Path::new("mem")).unwrap();
            let (x, y) = (a.store.get("t").unwrap(), b.store.get("t").unwrap());
            prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
