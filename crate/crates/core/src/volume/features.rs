use std::borrow::Borrow;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use super::{check_binary_mask, check_geometry, PatientDataset, Volume};
use crate::error::{Error, Result};
use crate::labeling::{label_tissue, DEFAULT_BONE_THRESHOLD_HU};

/// Which ring of neighbours contributes spatial features.
///
/// Offsets are listed as `(dz, dy, dx)` in lexicographic order, so the
/// first-order ring is `(-1,0,0) (0,-1,0) (0,0,-1) (0,0,1) (0,1,0) (1,0,0)`
/// and the second-order ring is all 26 non-zero offsets of the 3x3x3 cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeighborhoodOrder {
    First,
    Second,
}

impl NeighborhoodOrder {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::with_capacity(26);
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        NeighborhoodOrder::First => manhattan == 1,
                        NeighborhoodOrder::Second => manhattan >= 1,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }

    pub fn n_neighbors(self) -> usize {
        match self {
            NeighborhoodOrder::First => 6,
            NeighborhoodOrder::Second => 26,
        }
    }
}

impl fmt::Display for NeighborhoodOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeighborhoodOrder::First => "first",
            NeighborhoodOrder::Second => "second",
        })
    }
}

impl FromStr for NeighborhoodOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "6" => Ok(NeighborhoodOrder::First),
            "second" | "26" => Ok(NeighborhoodOrder::Second),
            other => Err(Error::InvalidArgument(format!("unknown neighborhood order `{other}`"))),
        }
    }
}

/// Flat table of masked voxels.
///
/// Each row's feature vector is `x^c = (x, x^s)`: the `d` raw channel
/// intensities followed by the spatial block, which is channel-major
/// (`d` groups of `n_neighbors` values in offset order).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    n_channels: usize,
    order: NeighborhoodOrder,
    patient_ids: Vec<String>,
    patient: Vec<u32>,
    voxel: Vec<usize>,
    features: Vec<f64>,
    target: Vec<f64>,
    labels: Vec<u8>,
}

impl SampleTable {
    pub fn n_rows(&self) -> usize {
        self.voxel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn order(&self) -> NeighborhoodOrder {
        self.order
    }

    /// Length of `x^c`.
    pub fn width(&self) -> usize {
        self.n_channels * (1 + self.order.n_neighbors())
    }

    /// Row-major `n_rows x width` matrix of `x^c`.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn combined(&self, row: usize) -> &[f64] {
        let w = self.width();
        &self.features[row * w..(row + 1) * w]
    }

    pub fn raw(&self, row: usize) -> &[f64] {
        &self.combined(row)[..self.n_channels]
    }

    pub fn spatial(&self, row: usize) -> &[f64] {
        &self.combined(row)[self.n_channels..]
    }

    pub fn targets(&self) -> &[f64] {
        &self.target
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn voxel_index(&self, row: usize) -> usize {
        self.voxel[row]
    }

    pub fn patient_id(&self, row: usize) -> &str {
        &self.patient_ids[self.patient[row] as usize]
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    /// Index into [`patient_ids`](Self::patient_ids) for each row.
    pub fn patient_of_rows(&self) -> &[u32] {
        &self.patient
    }

    /// Recomputes every label with a different CT threshold.
    pub fn relabel(&mut self, threshold: f64) -> Result<()> {
        for (t, &y) in self.labels.iter_mut().zip(&self.target) {
            *t = label_tissue(y, threshold)?.value();
        }
        Ok(())
    }

    /// Row-major `(y, x...)` vectors for rows of `class`. With `combined`
    /// the regressor block is `x^c`, otherwise only the raw channels.
    pub fn joint_rows(&self, class: u8, combined: bool, rows: Option<&[usize]>) -> Vec<f64> {
        let pick = |r: usize, out: &mut Vec<f64>| {
            if self.labels[r] == class {
                out.push(self.target[r]);
                out.extend_from_slice(if combined { self.combined(r) } else { self.raw(r) });
            }
        };
        let mut out = Vec::new();
        match rows {
            Some(rows) => rows.iter().for_each(|&r| pick(r, &mut out)),
            None => (0..self.n_rows()).for_each(|r| pick(r, &mut out)),
        }
        out
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["patient_id".to_string(), "voxel_index".to_string()];
        names.extend((0..self.n_channels).map(|c| format!("mr{c}")));
        for c in 0..self.n_channels {
            names.extend((0..self.order.n_neighbors()).map(|k| format!("mr{c}_n{k}")));
        }
        names.push("y".into());
        names.push("t".into());
        names
    }

    /// CSV with a one-line header naming every column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let to_err = |e: csv::Error| Error::format("sample table csv", e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.column_names()).map_err(to_err)?;
        let mut record = Vec::with_capacity(self.width() + 4);
        for r in 0..self.n_rows() {
            record.clear();
            record.push(self.patient_id(r).to_string());
            record.push(self.voxel[r].to_string());
            record.extend(self.combined(r).iter().map(|v| v.to_string()));
            record.push(self.target[r].to_string());
            record.push(self.labels[r].to_string());
            w.write_record(&record).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::format("sample table csv", e.to_string()))?;
        Ok(())
    }
}

/// Feature rows for one patient, labelled at the default 100 HU threshold.
pub fn extract_features(patient: &PatientDataset, order: NeighborhoodOrder) -> Result<SampleTable> {
    extract_features_with(patient, order, DEFAULT_BONE_THRESHOLD_HU)
}

pub fn extract_features_with(patient: &PatientDataset, order: NeighborhoodOrder, threshold: f64) -> Result<SampleTable> {
    let (voxel, features) = extract_unlabeled(patient.mr_channels(), patient.mask(), order)?;
    let ct = patient.ct().data();
    let target: Vec<f64> = voxel.iter().map(|&v| ct[v] as f64).collect();
    let labels = target
        .iter()
        .map(|&y| label_tissue(y, threshold).map(|t| t.value()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleTable {
        n_channels: patient.n_channels(),
        order,
        patient_ids: vec![patient.patient_id.clone()],
        patient: vec![0; voxel.len()],
        voxel,
        features,
        target,
        labels,
    })
}

/// Masked voxel indices (ascending) and their row-major `x^c` features,
/// without any CT target. Used at prediction time.
pub fn extract_unlabeled(channels: &[Volume], mask: &Volume, order: NeighborhoodOrder) -> Result<(Vec<usize>, Vec<f64>)> {
    if channels.is_empty() {
        return Err(Error::EmptyInput("no MR channels"));
    }
    check_geometry(channels, mask)?;
    check_binary_mask(mask)?;

    let voxel: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| (m == 1.0).then_some(i))
        .collect();
    if voxel.is_empty() {
        return Err(Error::EmptyMask);
    }

    let d = channels.len();
    let offsets = order.offsets();
    let width = d * (1 + offsets.len());
    let mut features = vec![0.0; voxel.len() * width];
    features
        .par_chunks_mut(width)
        .zip(voxel.par_iter())
        .for_each(|(row, &v)| {
            let [x, y, z] = mask.coords(v);
            let (x, y, z) = (x as isize, y as isize, z as isize);
            let (raw, spatial) = row.split_at_mut(d);
            for (c, vol) in channels.iter().enumerate() {
                raw[c] = vol.data()[v] as f64;
                let block = &mut spatial[c * offsets.len()..(c + 1) * offsets.len()];
                for (slot, [dz, dy, dx]) in block.iter_mut().zip(&offsets) {
                    *slot = vol.get_clamped(x + dx, y + dy, z + dz) as f64;
                }
            }
        });
    Ok((voxel, features))
}

/// Row-concatenates per-patient tables in the given patient order.
pub fn assemble<P: Borrow<PatientDataset>>(patients: &[P], order: NeighborhoodOrder, threshold: f64) -> Result<SampleTable> {
    let first = patients.first().ok_or(Error::EmptyInput("no patients to assemble"))?.borrow();
    let d = first.n_channels();
    if let Some(p) = patients.iter().map(Borrow::borrow).find(|p| p.n_channels() != d) {
        return Err(Error::dims(format!("channel count of patient {}", p.patient_id), d, p.n_channels()));
    }

    let mut out = SampleTable {
        n_channels: d,
        order,
        patient_ids: Vec::with_capacity(patients.len()),
        patient: Vec::new(),
        voxel: Vec::new(),
        features: Vec::new(),
        target: Vec::new(),
        labels: Vec::new(),
    };
    for (k, p) in patients.iter().map(Borrow::borrow).enumerate() {
        let t = extract_features_with(p, order, threshold)?;
        out.patient_ids.push(p.patient_id.clone());
        out.patient.extend(std::iter::repeat_n(k as u32, t.n_rows()));
        out.voxel.extend(t.voxel);
        out.features.extend(t.features);
        out.target.extend(t.target);
        out.labels.extend(t.labels);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_patient() -> PatientDataset {
        // 3x3x3 volume with distinct values v = index, second channel = 100 + index.
        let dims = [3, 3, 3];
        let ch0 = Volume::new(dims, [1.0; 3], (0..27).map(|i| i as f32).collect()).unwrap();
        let ch1 = Volume::new(dims, [1.0; 3], (0..27).map(|i| 100.0 + i as f32).collect()).unwrap();
        let ct = Volume::new(dims, [1.0; 3], (0..27).map(|i| i as f32 * 10.0).collect()).unwrap();
        let mask = Volume::filled(dims, [1.0; 3], 1.0).unwrap();
        PatientDataset::new("toy", vec![ch0, ch1], ct, mask).unwrap()
    }

    #[test]
    fn offset_order_is_lexicographic() {
        let first = NeighborhoodOrder::First.offsets();
        assert_eq!(first, vec![[-1, 0, 0], [0, -1, 0], [0, 0, -1], [0, 0, 1], [0, 1, 0], [1, 0, 0]]);
        let second = NeighborhoodOrder::Second.offsets();
        assert_eq!(second.len(), 26);
        assert!(second.windows(2).all(|w| w[0] < w[1]));
        assert!(!second.contains(&[0, 0, 0]));
    }

    #[test]
    fn interior_voxel_widths() {
        let p = toy_patient();
        let t1 = extract_features(&p, NeighborhoodOrder::First).unwrap();
        assert_eq!(t1.spatial(13).len(), 2 * 6);
        let t2 = extract_features(&p, NeighborhoodOrder::Second).unwrap();
        assert_eq!(t2.spatial(13).len(), 2 * 26);
        // Centre voxel (1,1,1) has linear index 13; first-order neighbours in
        // (dz,dy,dx) order are indices 4, 10, 12, 14, 16, 22.
        assert_eq!(t1.spatial(13)[..6], [4.0, 10.0, 12.0, 14.0, 16.0, 22.0]);
        assert_eq!(t1.spatial(13)[6..], [104.0, 110.0, 112.0, 114.0, 116.0, 122.0]);
    }

    #[test]
    fn corner_voxel_matches_hand_enumeration() {
        let p = toy_patient();
        let t = extract_features(&p, NeighborhoodOrder::Second).unwrap();
        // Corner (0,0,0): clamped neighbour (x', y', z') = (max(dx,0), max(dy,0), max(dz,0)),
        // index x' + 3 y' + 9 z'. Enumerated over (dz,dy,dx) lexicographically, skipping the centre.
        let expected: Vec<f64> = vec![
            0., 0., 1., 0., 0., 1., 3., 3., 4., // dz = -1
            0., 0., 1., 0., 1., 3., 3., 4., // dz = 0 (centre skipped)
            9., 9., 10., 9., 9., 10., 12., 12., 13., // dz = +1
        ];
        assert_eq!(t.voxel_index(0), 0);
        assert_eq!(&t.spatial(0)[..26], expected.as_slice());
        let shifted: Vec<f64> = expected.iter().map(|v| v + 100.0).collect();
        assert_eq!(&t.spatial(0)[26..], shifted.as_slice());
    }

    #[test]
    fn empty_mask_is_an_error() {
        let p = toy_patient();
        let mask = Volume::filled([3, 3, 3], [1.0; 3], 0.0).unwrap();
        let p = PatientDataset::new("e", p.mr_channels().to_vec(), p.ct().clone(), mask).unwrap();
        assert!(matches!(extract_features(&p, NeighborhoodOrder::First), Err(Error::EmptyMask)));
    }

    #[test]
    fn labels_follow_threshold() {
        let p = toy_patient();
        let mut t = extract_features(&p, NeighborhoodOrder::First).unwrap();
        // CT = 10 * index: index <= 10 is non-bone.
        assert_eq!(t.labels().iter().filter(|&&l| l == 0).count(), 11);
        t.relabel(200.0).unwrap();
        assert_eq!(t.labels().iter().filter(|&&l| l == 0).count(), 21);
    }

    #[test]
    fn csv_header_names_every_column() {
        let p = toy_patient();
        let t = extract_features(&p, NeighborhoodOrder::First).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 2 + 2 + 12 + 2);
        assert!(header.starts_with("patient_id,voxel_index,mr0,mr1,mr0_n0"));
        assert_eq!(text.lines().count(), 28);
    }
}
