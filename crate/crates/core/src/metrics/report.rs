use std::collections::BTreeMap;
use std::fmt::Write as _;

use anomaly_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{auroc, pro};
use crate::error::{Error, Result};

/// One scored test image.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub category: String,
    /// `(h, w)` pixel scores.
    pub pixels: Tensor<f32>,
    pub image_score: f32,
    /// `(h, w)` ground truth, nonzero marks anomalous pixels.
    pub mask: Tensor<f32>,
    pub anomalous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
    pub images: usize,
    pub anomalous_images: usize,
    pub normal_images: usize,
}

/// Metrics per category; the top-level numbers are category means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro: f64,
    pub images: usize,
    pub anomalous_images: usize,
    pub normal_images: usize,
    pub fpr_limit: f64,
    pub config_digest: String,
    pub categories: BTreeMap<String, CategoryReport>,
}

fn category_report(items: &[&ScoredImage], fpr_limit: f64) -> Result<CategoryReport> {
    let scores: Vec<f64> = items.iter().map(|s| s.image_score as f64).collect();
    let labels: Vec<bool> = items.iter().map(|s| s.anomalous).collect();
    let image_auroc = auroc(&scores, &labels)?;

    let mut px_scores = Vec::new();
    let mut px_labels = Vec::new();
    for s in items {
        if s.pixels.shape() != s.mask.shape() {
            return Err(Error::Data(format!(
                "score map {:?} vs mask {:?}",
                s.pixels.shape(),
                s.mask.shape()
            )));
        }
        px_scores.extend(s.pixels.data().iter().map(|&v| v as f64));
        px_labels.extend(s.mask.data().iter().map(|&v| v > 0.5));
    }
    let pixel_auroc = auroc(&px_scores, &px_labels)?;
    let maps: Vec<Tensor<f32>> = items.iter().map(|s| s.pixels.clone()).collect();
    let masks: Vec<Tensor<f32>> = items.iter().map(|s| s.mask.clone()).collect();
    let pro = pro(&maps, &masks, fpr_limit)?;
    let anomalous = labels.iter().filter(|&&l| l).count();
    Ok(CategoryReport {
        image_auroc,
        pixel_auroc,
        pro,
        images: items.len(),
        anomalous_images: anomalous,
        normal_images: items.len() - anomalous,
    })
}

pub fn evaluate(images: &[ScoredImage], fpr_limit: f64, config_digest: &str) -> Result<EvalReport> {
    let mut by_cat: BTreeMap<&str, Vec<&ScoredImage>> = BTreeMap::new();
    for s in images {
        by_cat.entry(&s.category).or_default().push(s);
    }
    if by_cat.is_empty() {
        return Err(Error::UndefinedMetric("no test images".into()));
    }
    let mut categories = BTreeMap::new();
    for (name, items) in by_cat {
        let r = category_report(&items, fpr_limit).map_err(|e| match e {
            Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{name}: {m}")),
            other => other,
        })?;
        categories.insert(name.to_string(), r);
    }
    let n = categories.len() as f64;
    let mean = |f: fn(&CategoryReport) -> f64| categories.values().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        image_auroc: mean(|r| r.image_auroc),
        pixel_auroc: mean(|r| r.pixel_auroc),
        pro: mean(|r| r.pro),
        images: categories.values().map(|r| r.images).sum(),
        anomalous_images: categories.values().map(|r| r.anomalous_images).sum(),
        normal_images: categories.values().map(|r| r.normal_images).sum(),
        fpr_limit,
        config_digest: config_digest.to_string(),
        categories,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width table, one row per category and a mean row.
    pub fn to_table(&self) -> String {
        let width = self
            .categories
            .keys()
            .map(|k| k.len())
            .chain(std::iter::once("mean".len()))
            .max()
            .unwrap_or(4);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>7}  {:>6}  {:>6}",
            "category", "I-AUROC", "P-AUROC", "PRO", "good", "anom"
        );
        let mut row = |name: &str, a: f64, b: f64, c: f64, good: usize, anom: usize| {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>9.2}  {:>9.2}  {:>7.2}  {good:>6}  {anom:>6}",
                a * 100.0,
                b * 100.0,
                c * 100.0
            );
        };
        for (name, r) in &self.categories {
            row(
                name,
                r.image_auroc,
                r.pixel_auroc,
                r.pro,
                r.normal_images,
                r.anomalous_images,
            );
        }
        row(
            "mean",
            self.image_auroc,
            self.pixel_auroc,
            self.pro,
            self.normal_images,
            self.anomalous_images,
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(cat: &str, anomalous: bool, score: f32) -> ScoredImage {
        let mask = Tensor::from_fn(&[4, 4], |i| {
            if anomalous && i / 4 < 2 && i % 4 < 2 {
                1.0
            } else {
                0.0
            }
        });
        ScoredImage {
            category: cat.into(),
            pixels: mask.map(|v| v * score),
            image_score: score,
            mask,
            anomalous,
        }
    }

    #[test]
    fn perfect_scores_and_table() {
        let images = vec![
            item("a", true, 0.9),
            item("a", false, 0.1),
            item("b", true, 0.8),
            item("b", false, 0.2),
        ];
        let r = evaluate(&images, 0.3, "abc").unwrap();
        assert_eq!(r.categories.len(), 2);
        assert_eq!(r.image_auroc, 1.0);
        assert_eq!(r.pixel_auroc, 1.0);
        assert!((r.pro - 1.0).abs() < 1e-12);
        assert_eq!((r.images, r.anomalous_images, r.normal_images), (4, 2, 2));
        let table = r.to_table();
        assert_eq!(table.lines().count(), 4);
        let json: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json, r);
    }

    #[test]
    fn category_without_anomalies_is_undefined() {
        let images = vec![item("a", false, 0.1), item("a", false, 0.3)];
        assert!(matches!(
            evaluate(&images, 0.3, ""),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
