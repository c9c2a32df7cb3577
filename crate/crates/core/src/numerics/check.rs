//! Central-difference gradient oracle.

use indexmap::IndexMap;

use super::graph::{grad, Graph, Var};
use super::store::ParameterStore;
use crate::error::Result;

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryStatus {
    Pass,
    Fail,
    /// The ±step stencil straddles a ReLU or max-pool switch, so the
    /// function is not smooth there; excluded from pass/fail.
    NonDifferentiable,
}

#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub status: EntryStatus,
}

#[derive(Clone, Debug)]
pub enum ParamCheck {
    Skipped,
    Checked(Vec<EntryCheck>),
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub tol: f64,
    pub params: IndexMap<String, ParamCheck>,
}

impl FdReport {
    fn checked(&self) -> impl Iterator<Item = &EntryCheck> {
        self.params.values().flat_map(|p| match p {
            ParamCheck::Skipped => [].iter(),
            ParamCheck::Checked(e) => e.iter(),
        })
    }

    pub fn passed(&self) -> bool {
        self.checked().all(|e| e.status != EntryStatus::Fail)
    }

    /// Largest relative error over entries not flagged non-differentiable.
    pub fn max_rel_error(&self) -> f64 {
        self.checked()
            .filter(|e| e.status != EntryStatus::NonDifferentiable)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn entries_checked(&self) -> usize {
        self.checked()
            .filter(|e| e.status != EntryStatus::NonDifferentiable)
            .count()
    }

    pub fn kinks(&self) -> usize {
        self.checked()
            .filter(|e| e.status == EntryStatus::NonDifferentiable)
            .count()
    }

    pub fn failures(&self) -> Vec<(&str, &EntryCheck)> {
        self.params
            .iter()
            .filter_map(|(name, p)| match p {
                ParamCheck::Checked(e) => Some(e.iter().map(move |e| (name.as_str(), e))),
                ParamCheck::Skipped => None,
            })
            .flatten()
            .filter(|(_, e)| e.status == EntryStatus::Fail)
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(stores: &[ParameterStore], loss: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[&ParameterStore]) -> Result<Var>,
{
    let refs: Vec<&ParameterStore> = stores.iter().collect();
    let mut g = Graph::new();
    let v = loss(&mut g, &refs)?;
    Ok((g.value(v).item(), g.kink_signature()))
}

/// Compares the tape gradient of `loss` against central differences for
/// every entry of every trainable tensor in `stores`. Frozen tensors are
/// reported as skipped.
pub fn finite_diff_check<F>(stores: &[ParameterStore], loss: F, step: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[&ParameterStore]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let refs: Vec<&ParameterStore> = stores.iter().collect();
    let mut base_sig = 0;
    let analytic = grad(&refs, |g| {
        let v = loss(g, &refs)?;
        base_sig = g.kink_signature();
        Ok(v)
    })?;

    let mut work: Vec<ParameterStore> = stores.to_vec();
    let mut params = IndexMap::new();
    for si in 0..stores.len() {
        let names: Vec<(String, bool)> = stores[si]
            .iter()
            .map(|(n, e)| (n.to_string(), e.trainable))
            .collect();
        for (name, trainable) in names {
            if !trainable {
                params.insert(name, ParamCheck::Skipped);
                continue;
            }
            let an = analytic.grads[&name].clone();
            let mut entries = Vec::with_capacity(an.len());
            for i in 0..an.len() {
                let orig = stores[si].get(&name)?.data()[i];
                work[si].get_mut(&name)?.data_mut()[i] = orig + step;
                let (plus, sig_plus) = evaluate(&work, &loss)?;
                work[si].get_mut(&name)?.data_mut()[i] = orig - step;
                let (minus, sig_minus) = evaluate(&work, &loss)?;
                work[si].get_mut(&name)?.data_mut()[i] = orig;

                let numeric = (plus - minus) / (2.0 * step);
                let a = an.data()[i];
                let rel_error = relative_error(a, numeric);
                let status = if sig_plus != base_sig || sig_minus != base_sig {
                    EntryStatus::NonDifferentiable
                } else if rel_error < tol {
                    EntryStatus::Pass
                } else {
                    EntryStatus::Fail
                };
                entries.push(EntryCheck {
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error,
                    status,
                });
            }
            params.insert(name, ParamCheck::Checked(entries));
        }
    }
    Ok(FdReport { tol, params })
}
