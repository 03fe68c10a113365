use crate::error::Result;
use crate::hvt;
use crate::tensor::TensorData;
use std::collections::BTreeMap;
use std::path::Path;

/// Named tensor collection: model parameters, optimizer state, checkpoints.
/// Iteration order is always name order, so every consumer sees the same
/// deterministic entry sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, TensorData>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: TensorData) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorData> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut TensorData)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Same shapes, all values zero.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, TensorData::zeros(t.shape().to_vec()));
        }
        out
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> hvt::Result<()> {
        hvt::write_entries(path, self.iter())
    }

    pub fn load(path: &Path) -> hvt::Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, tensor) in hvt::read_entries(path)? {
            out.insert(name, tensor);
        }
        Ok(out)
    }
}

impl FromIterator<(String, TensorData)> for ParamSet {
    fn from_iter<T: IntoIterator<Item = (String, TensorData)>>(iter: T) -> Self {
        let mut out = ParamSet::new();
        for (k, v) in iter {
            out.insert(k, v);
        }
        out
    }
}

/// One finite-difference comparison entry.
#[derive(Clone, Debug)]
pub struct FdEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<FdEntry>,
    pub failures: Vec<FdEntry>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients against central finite differences
/// (f(p+h) - f(p-h)) / 2h for every entry of every parameter. Relative
/// error uses denominator max(|analytic|, |numeric|, 1e-8). Failures are
/// returned as data, never as an error.
pub fn finite_diff_check<F>(
    params: &ParamSet,
    analytic: &BTreeMap<String, Vec<f64>>,
    mut f: F,
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut work = params.clone();
    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
        tolerance,
    };
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in &names {
        let numel = params.get(name).unwrap().numel();
        let zero = vec![0.0; numel];
        let grads = analytic.get(name).map(|v| v.as_slice()).unwrap_or(&zero);
        for idx in 0..numel {
            let orig = params.get(name).unwrap().data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = orig + step;
            let plus = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig - step;
            let minus = f(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(FdEntry {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
            if rel > tolerance {
                report.failures.push(FdEntry {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
