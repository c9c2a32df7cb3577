use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Shape of the frozen segmenter.
///
/// The image is cut into an `m × n` grid of `patch_height × patch_width`
/// patches, with `m = image_width / patch_width` columns and
/// `n = image_height / patch_height` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub decoder_blocks: usize,
    pub mask_hidden: usize,
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// Default desk-scale model.
    pub fn toy() -> Self {
        BackboneConfig {
            image_height: 64,
            image_width: 64,
            patch_height: 8,
            patch_width: 8,
            embed_dim: 32,
            layers: 4,
            heads: 4,
            mlp_hidden: 128,
            decoder_blocks: 2,
            mask_hidden: 32,
            channels: 1,
        }
    }

    /// The larger configuration (128², 256 tokens, d = 64, eight layers).
    pub fn wide() -> Self {
        BackboneConfig {
            image_height: 128,
            image_width: 128,
            patch_height: 8,
            patch_width: 8,
            embed_dim: 64,
            layers: 8,
            heads: 4,
            mlp_hidden: 256,
            decoder_blocks: 2,
            mask_hidden: 64,
            channels: 1,
        }
    }

    /// Smallest configuration used for gradient checks.
    pub fn micro() -> Self {
        BackboneConfig {
            image_height: 32,
            image_width: 32,
            patch_height: 8,
            patch_width: 8,
            embed_dim: 16,
            layers: 2,
            heads: 2,
            mlp_hidden: 32,
            decoder_blocks: 2,
            mask_hidden: 16,
            channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("mask_hidden", self.mask_hidden),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_height % self.patch_height != 0 || self.image_width % self.patch_width != 0 {
            return Err(Error::Config(format!(
                "image {}×{} is not divisible into {}×{} patches",
                self.image_height, self.image_width, self.patch_height, self.patch_width
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config("embed_dim must be a multiple of 4".into()));
        }
        if self.layers < 1 {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.decoder_blocks < 2 {
            return Err(Error::Config("at least two decoder blocks are required".into()));
        }
        Ok(())
    }

    /// Patch-grid columns (`m`).
    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_width
    }

    /// Patch-grid rows (`n`).
    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_height
    }

    pub fn tokens(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch_height * self.patch_width
    }

    /// Closed-form parameter count of an initialized backbone store:
    ///
    /// ```text
    /// embed     d·c·h·w + T·d
    /// layer     4d² + 2·d·hid + 9d + hid        (×N)
    /// prompt    d
    /// decoder   8d² + 16d                       (×D)
    /// head      2d + mh·d + 2mh + 1
    /// ```
    ///
    /// with `T = m·n` tokens, `hid` the MLP width and `mh` the mask-head width.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let hid = self.mlp_hidden;
        let mh = self.mask_hidden;
        let embed = d * self.patch_features() + self.tokens() * d;
        let layer = 4 * d * d + 2 * d * hid + 9 * d + hid;
        let decoder = 8 * d * d + 16 * d;
        let head = 2 * d + mh * d + 2 * mh + 1;
        embed + self.layers * layer + d + self.decoder_blocks * decoder + head
    }

    pub fn to_meta(&self) -> IndexMap<String, String> {
        self.fields()
            .into_iter()
            .map(|(k, v)| (format!("backbone.{k}"), v.to_string()))
            .collect()
    }

    pub fn from_meta(meta: &IndexMap<String, String>) -> Result<Self> {
        let mut cfg = BackboneConfig::toy();
        for (key, value) in meta {
            let Some(field) = key.strip_prefix("backbone.") else { continue };
            let v: usize = value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: not an integer: {value}")))?;
            cfg.set(field, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn fields(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("decoder_blocks", self.decoder_blocks),
            ("mask_hidden", self.mask_hidden),
            ("channels", self.channels),
        ]
    }

    pub fn set(&mut self, field: &str, v: usize) -> Result<()> {
        let slot = match field {
            "image_height" => &mut self.image_height,
            "image_width" => &mut self.image_width,
            "patch_height" => &mut self.patch_height,
            "patch_width" => &mut self.patch_width,
            "embed_dim" => &mut self.embed_dim,
            "layers" => &mut self.layers,
            "heads" => &mut self.heads,
            "mlp_hidden" => &mut self.mlp_hidden,
            "decoder_blocks" => &mut self.decoder_blocks,
            "mask_hidden" => &mut self.mask_hidden,
            "channels" => &mut self.channels,
            other => return Err(Error::Config(format!("unknown backbone field `{other}`"))),
        };
        *slot = v;
        Ok(())
    }
}
