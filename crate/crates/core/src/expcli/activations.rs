//! Per-neuron mean activations of the final features for one class across
//! noise levels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{bind_frozen, BackboneSplit};
use crate::checkpoint::{write_atomic, write_json};
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, PreprocessConfig};
use crate::nn::Graph;
use crate::pipeline::{normalized_batch, Cell};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationTable {
    /// Column labels; the first is the reference level.
    pub levels: Vec<String>,
    /// `means[level][neuron]`.
    pub means: Vec<Vec<f64>>,
    /// Neurons sorted by descending |first − last| level difference.
    pub order: Vec<usize>,
}

impl ActivationTable {
    pub fn new(levels: Vec<String>, means: Vec<Vec<f64>>) -> Result<Self> {
        if levels.len() != means.len() || means.len() < 2 {
            return Err(Error::invalid("activation table needs at least two labelled levels"));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) {
            return Err(Error::Shape("activation levels differ in feature width".into()));
        }
        let order = order_by_difference(&means[0], &means[means.len() - 1]);
        Ok(Self { levels, means, order })
    }

    pub fn feature_dim(&self) -> usize {
        self.means[0].len()
    }

    /// `|reference − most degraded|` per neuron.
    pub fn differences(&self) -> Vec<f64> {
        let last = &self.means[self.means.len() - 1];
        self.means[0].iter().zip(last).map(|(a, b)| (a - b).abs()).collect()
    }

    /// Mean absolute gap between the first and last level.
    pub fn mean_gap(&self) -> f64 {
        let d = self.differences();
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }

    /// One row per neuron in difference order.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["rank".to_string(), "neuron".to_string()];
        header.extend(self.levels.iter().cloned());
        header.push("abs_difference".into());
        w.write_record(&header).map_err(|e| Error::invalid(e.to_string()))?;
        let diffs = self.differences();
        for (rank, &n) in self.order.iter().enumerate() {
            let mut rec = vec![rank.to_string(), n.to_string()];
            rec.extend(self.means.iter().map(|m| format!("{:.6}", m[n])));
            rec.push(format!("{:.6}", diffs[n]));
            w.write_record(&rec).map_err(|e| Error::invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Line plot: neuron rank on x, mean activation on y, one line per level
    /// from dark (reference) to light red (most degraded).
    pub fn write_png(&self, path: &Path) -> Result<()> {
        use plotters::prelude::*;
        let (w, h) = (960u32, 480u32);
        let mut buf = vec![255u8; (w * h * 3) as usize];
        let lo = self.means.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = self.means.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-6);
        let n = self.feature_dim();
        let plot_err = |e: &dyn std::fmt::Display| Error::invalid(format!("plot: {e}"));
        {
            let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
            let mut chart = ChartBuilder::on(&root)
                .margin(12)
                .build_cartesian_2d(0f64..n.max(2) as f64 - 1.0, lo - pad..hi + pad)
                .map_err(|e| plot_err(&e))?;
            chart
                .plotting_area()
                .draw(&Rectangle::new(
                    [(0.0, lo - pad), (n.max(2) as f64 - 1.0, hi + pad)],
                    BLACK.stroke_width(1),
                ))
                .map_err(|e| plot_err(&e))?;
            let k = self.means.len();
            for (li, m) in self.means.iter().enumerate() {
                let t = li as f64 / (k - 1) as f64;
                let colour = RGBColor((40.0 + 215.0 * t) as u8, (40.0 * (1.0 - t)) as u8, (90.0 * (1.0 - t)) as u8);
                let series = self.order.iter().enumerate().map(|(r, &i)| (r as f64, m[i]));
                chart
                    .draw_series(LineSeries::new(series, colour.stroke_width(2)))
                    .map_err(|e| plot_err(&e))?;
            }
            root.present().map_err(|e| plot_err(&e))?;
        }
        let img = image::RgbImage::from_raw(w, h, buf).ok_or_else(|| Error::invalid("plot buffer size"))?;
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                source: e,
            })?;
        write_atomic(path, &bytes)
    }
}

/// Indices sorted by descending `|a − b|`; ties keep index order.
pub fn order_by_difference(a: &[f64], b: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| (b[j] - a[j]).abs().total_cmp(&(b[i] - a[i]).abs()).then(i.cmp(&j)));
    idx
}

/// Mean of the final features over `images`, per neuron.
pub fn mean_features(split: &BackboneSplit, images: &[ImageTensor], prep: &PreprocessConfig) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Dataset("no images to average activations over".into()));
    }
    let mut sum = vec![0.0f64; split.feature_dim];
    for chunk in images.chunks(64) {
        let mut g = Graph::new();
        let p = bind_frozen(&split.classifier.params, &mut g);
        let x = g.constant(normalized_batch(chunk, prep)?);
        let f = split.features(&mut g, &p, x, &mut |_, _, v| v);
        let t = g.value(f);
        for row in t.data().chunks(split.feature_dim) {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += f64::from(v);
            }
        }
    }
    Ok(sum.into_iter().map(|s| s / images.len() as f64).collect())
}

/// Both tables of one class: features of the degraded inputs and of their
/// restorations. `cells` must be uniform conditions ordered from the
/// reference level, each built with a restorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub class_id: usize,
    pub class_name: String,
    pub images: usize,
    pub without_restoration: ActivationTable,
    pub with_restoration: ActivationTable,
}

impl ActivationReport {
    pub fn build(split: &BackboneSplit, cells: &[Cell], class_id: usize, class_name: &str, prep: &PreprocessConfig) -> Result<Self> {
        let pick = |imgs: &[ImageTensor], labels: &[usize]| -> Vec<ImageTensor> {
            imgs.iter()
                .zip(labels)
                .filter(|(_, &l)| l == class_id)
                .map(|(i, _)| i.clone())
                .collect()
        };
        let mut levels = Vec::new();
        let (mut plain, mut restored) = (Vec::new(), Vec::new());
        let mut images = 0;
        for cell in cells {
            let deg = pick(&cell.degraded, &cell.labels);
            if deg.is_empty() {
                return Err(Error::Class {
                    class: class_name.into(),
                    reason: "no validation images".into(),
                });
            }
            images = deg.len();
            let rest = cell
                .restored
                .as_ref()
                .ok_or_else(|| Error::invalid("activation cells need restored images"))?;
            levels.push(cell.condition.to_string());
            plain.push(mean_features(split, &deg, prep)?);
            restored.push(mean_features(split, &pick(rest, &cell.labels), prep)?);
        }
        Ok(Self {
            class_id,
            class_name: class_name.into(),
            images,
            without_restoration: ActivationTable::new(levels.clone(), plain)?,
            with_restoration: ActivationTable::new(levels, restored)?,
        })
    }

    /// `<stem>.csv`, `<stem>_restored.csv`, two PNG plots and a JSON summary.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.csv")), self.without_restoration.to_csv()?.as_bytes())?;
        write_atomic(
            &dir.join(format!("{stem}_restored.csv")),
            self.with_restoration.to_csv()?.as_bytes(),
        )?;
        self.without_restoration.write_png(&dir.join(format!("{stem}.png")))?;
        self.with_restoration.write_png(&dir.join(format!("{stem}_restored.png")))?;
        write_json(
            &dir.join(format!("{stem}.json")),
            &serde_json::json!({
                "class_id": self.class_id,
                "class_name": self.class_name,
                "images": self.images,
                "levels": self.without_restoration.levels,
                "mean_gap_without_restoration": self.without_restoration.mean_gap(),
                "mean_gap_with_restoration": self.with_restoration.mean_gap(),
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_levels_have_zero_difference() {
        let m = vec![0.5, -1.0, 2.0];
        let t = ActivationTable::new(vec!["clean".into(), "clean".into()], vec![m.clone(), m]).unwrap();
        assert!(t.differences().iter().all(|&d| d == 0.0));
        assert_eq!(t.order, vec![0, 1, 2]);
        assert_eq!(t.mean_gap(), 0.0);
    }

    #[test]
    fn order_follows_the_absolute_difference() {
        assert_eq!(order_by_difference(&[0.0, 0.0, 0.0], &[1.0, -3.0, 2.0]), vec![1, 2, 0]);
    }

    #[test]
    fn csv_has_one_row_per_neuron() {
        let t = ActivationTable::new(
            vec!["clean".into(), "sigma=0.5".into()],
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 0.0, 3.5, 4.0]],
        )
        .unwrap();
        let csv = t.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + t.feature_dim());
        assert!(csv.lines().nth(1).unwrap().starts_with("0,1,"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        t.write_png(&p).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (960, 480));
    }

    #[test]
    fn mismatched_levels_are_rejected() {
        assert!(ActivationTable::new(vec!["a".into()], vec![vec![1.0]]).is_err());
        assert!(ActivationTable::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
