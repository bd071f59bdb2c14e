//! Text serialization of [`TissueGmm`].
//!
//! ```text
//! rgmm-gmm 1
//! dim 5
//! classes 2
//! class 0 components 2
//! weight 4.5e-1
//! mean <dim values>
//! cov <dim*dim values, row-major>
//! weight ...
//! ...
//! end
//! ```
//!
//! Floats are written in shortest round-trip exponent form, so reading back
//! reproduces every bit.

use nalgebra::{DMatrix, DVector};

use super::{GaussianComponent, MixtureModel, TissueGmm};
use crate::error::{Error, Result};

const MAGIC: &str = "rgmm-gmm 1";

pub fn write_tissue_gmm(gmm: &TissueGmm) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("dim {}\nclasses {}\n", gmm.dim(), gmm.n_classes()));
    for (k, m) in gmm.models().iter().enumerate() {
        out.push_str(&format!("class {k} components {}\n", m.n_components()));
        for (w, c) in m.weights().iter().zip(m.components()) {
            out.push_str(&format!("weight {w:e}\n"));
            push_floats(&mut out, "mean", c.mean.iter());
            push_floats(&mut out, "cov", c.covariance.transpose().iter());
        }
    }
    out.push_str("end\n");
    out
}

fn push_floats<'a>(out: &mut String, key: &str, values: impl Iterator<Item = &'a f64>) {
    out.push_str(key);
    for v in values {
        out.push_str(&format!(" {v:e}"));
    }
    out.push('\n');
}

pub fn read_tissue_gmm(text: &str) -> Result<TissueGmm> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut next = |what: &str| lines.next().ok_or_else(|| Error::format("gmm", format!("unexpected end, wanted {what}")));

    if next("magic")? != MAGIC {
        return Err(Error::format("gmm", "bad magic line"));
    }
    let dim: usize = keyed(next("dim")?, "dim")?;
    let classes: usize = keyed(next("classes")?, "classes")?;
    let mut models = Vec::with_capacity(classes);
    for k in 0..classes {
        let line = next("class")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "class" || parts[2] != "components" || parts[1] != k.to_string() {
            return Err(Error::format("gmm", format!("bad class line `{line}`")));
        }
        let n: usize = parts[3].parse().map_err(|_| Error::format("gmm", format!("bad component count `{line}`")))?;
        let mut weights = Vec::with_capacity(n);
        let mut comps = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(keyed::<f64>(next("weight")?, "weight")?);
            let mean = floats(next("mean")?, "mean", dim)?;
            let cov = floats(next("cov")?, "cov", dim * dim)?;
            comps.push(GaussianComponent::new(DVector::from_vec(mean), DMatrix::from_row_slice(dim, dim, &cov))?);
        }
        models.push(MixtureModel::new(weights, comps)?);
    }
    if next("end")? != "end" {
        return Err(Error::format("gmm", "missing end marker"));
    }
    TissueGmm::new(models)
}

fn keyed<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    line.strip_prefix(key)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::format("gmm", format!("expected `{key} <value>`, got `{line}`")))
}

fn floats(line: &str, key: &str, count: usize) -> Result<Vec<f64>> {
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| Error::format("gmm", format!("expected `{key}` line, got `{line}`")))?;
    let values = rest
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("gmm", format!("{key}: {e}")))?;
    if values.len() != count {
        return Err(Error::format("gmm", format!("{key}: expected {count} values, got {}", values.len())));
    }
    Ok(values)
}
