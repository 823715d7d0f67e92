//! Tolerance-rule quality control over segmentation masks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassMap, IndexMask};
use crate::error::{shape_err, Error, Result};
use crate::metrics::{image_confusion, Confusion, ImageLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcMode {
    /// Any pixel of the class rejects the image.
    Forbidden,
    /// Rejects once the class covers at least this many pixels.
    MaxArea(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcRule {
    pub class_name: String,
    pub mode: QcMode,
}

/// What happens to defect classes without a rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnlistedPolicy {
    #[default]
    Forbidden,
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QcRuleSet {
    pub product: String,
    pub rules: Vec<QcRule>,
    pub unlisted: UnlistedPolicy,
}

/// Tolerances for the zipper, pill and wood products, in the rule-file
/// format.
pub const ZIPPER_RULES: &str = "# zipper\nteeth forbidden\nfabric max_area 4800\n";
pub const PILL_RULES: &str = "# pill\ncracks forbidden\ncontamination max_area 4000\ncolor_stains max_area 300\n";
pub const WOOD_RULES: &str = "# wood\nscratch forbidden\ndent forbidden\nimpurities max_area 250\nstain max_area 1000\n";

/// `(product, defect classes, rule text)` for the bundled products.
pub fn builtin_products() -> [(&'static str, &'static [&'static str], &'static str); 3] {
    [
        ("zipper", &["teeth", "fabric"], ZIPPER_RULES),
        ("pill", &["cracks", "contamination", "color_stains"], PILL_RULES),
        ("wood", &["scratch", "dent", "impurities", "stain"], WOOD_RULES),
    ]
}

/// Parses `<class> forbidden` / `<class> max_area <int>` lines; `#` starts
/// a comment.
pub fn parse_rules_str(text: &str, product: &str, class_map: &ClassMap, unlisted: UnlistedPolicy) -> Result<QcRuleSet> {
    let mut rules: Vec<QcRule> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Rules { line: i + 1, reason };
        let parts: Vec<&str> = line.split_whitespace().collect();
        let mode = match parts.as_slice() {
            [_, "forbidden"] => QcMode::Forbidden,
            [_, "max_area", n] => {
                let n: u64 = n.parse().map_err(|_| err(format!("invalid pixel threshold {n:?}")))?;
                if n == 0 {
                    return Err(err("max_area threshold must be at least 1".into()));
                }
                QcMode::MaxArea(n)
            }
            [_, mode, ..] => return Err(err(format!("unknown mode {mode:?}"))),
            _ => return Err(err(format!("expected `<class> <mode> [pixels]`, got {line:?}"))),
        };
        let name = parts[0];
        match class_map.index_of(name) {
            Some(0) => return Err(err("background cannot carry a rule".into())),
            Some(_) => {}
            None => return Err(err(format!("class {name:?} is not in the class map"))),
        }
        if rules.iter().any(|r| r.class_name == name) {
            return Err(err(format!("duplicate rule for class {name:?}")));
        }
        rules.push(QcRule {
            class_name: name.to_string(),
            mode,
        });
    }
    Ok(QcRuleSet {
        product: product.to_string(),
        rules,
        unlisted,
    })
}

/// Reads a rule file; the product name is the file stem.
pub fn parse_rules(path: &Path, class_map: &ClassMap, unlisted: UnlistedPolicy) -> Result<QcRuleSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let product = path.file_stem().and_then(|s| s.to_str()).unwrap_or("product");
    parse_rules_str(&text, product, class_map, unlisted)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub class_name: String,
    pub pixels: u64,
    /// `None` for a forbidden class.
    pub threshold: Option<u64>,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.threshold {
            Some(t) => write!(f, "{}:{}>={}", self.class_name, self.pixels, t),
            None => write!(f, "{}:{}", self.class_name, self.pixels),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub label: ImageLabel,
    pub violations: Vec<Violation>,
}

/// Image-level decision from per-class pixel totals.
pub fn classify(mask: &IndexMask, rules: &QcRuleSet, class_map: &ClassMap) -> Result<Decision> {
    let n = class_map.n_classes();
    if let Some(&v) = mask.data.iter().find(|&&v| v as usize >= n) {
        return Err(Error::Range {
            value: v as i64,
            context: format!("mask class outside the {n}-class map"),
        });
    }
    let counts = mask.class_counts(n);
    let by_name: BTreeMap<&str, QcMode> = rules.rules.iter().map(|r| (r.class_name.as_str(), r.mode)).collect();
    let mut violations = Vec::new();
    for (k, &count) in counts.iter().enumerate().skip(1) {
        let pixels = count as u64;
        if pixels == 0 {
            continue;
        }
        let name = class_map.name(k).expect("index within map");
        let mode = match by_name.get(name) {
            Some(&m) => m,
            None => match rules.unlisted {
                UnlistedPolicy::Forbidden => QcMode::Forbidden,
                UnlistedPolicy::Ignored => continue,
            },
        };
        let threshold = match mode {
            QcMode::Forbidden => None,
            QcMode::MaxArea(t) if pixels >= t => Some(t),
            QcMode::MaxArea(_) => continue,
        };
        violations.push(Violation {
            class_name: name.to_string(),
            pixels,
            threshold,
        });
    }
    let label = if violations.is_empty() {
        ImageLabel::Benign
    } else {
        ImageLabel::Defective
    };
    Ok(Decision { label, violations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAudit {
    pub sample_id: String,
    pub gt: Decision,
    pub pred: Decision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub product: String,
    pub confusion: Confusion,
    pub images: Vec<ImageAudit>,
}

impl QcReport {
    pub fn recall(&self) -> Option<f64> {
        self.confusion.recall
    }

    pub fn fpr(&self) -> Option<f64> {
        self.confusion.fpr
    }

    /// Per-image rows: `sample_id,gt_label,pred_label,violations`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,gt_label,pred_label,violations\n");
        for a in &self.images {
            let v: Vec<String> = a.pred.violations.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{},{},{},{}", a.sample_id, a.gt.label.name(), a.pred.label.name(), v.join(";"));
        }
        s
    }

    pub fn summary_kv(&self) -> String {
        let c = &self.confusion;
        let opt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| x.to_string());
        format!(
            "product={}\nimages={}\ntp={}\nfp={}\ntn={}\nfn={}\nrecall={}\nfpr={}\n",
            self.product,
            self.images.len(),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            opt(c.recall),
            opt(c.fpr)
        )
    }
}

/// Classifies predicted and ground-truth masks and scores the agreement.
pub fn evaluate(
    sample_ids: &[String],
    preds: &[IndexMask],
    gts: &[IndexMask],
    rules: &QcRuleSet,
    class_map: &ClassMap,
) -> Result<QcReport> {
    if preds.len() != gts.len() || sample_ids.len() != gts.len() {
        return Err(shape_err(format!(
            "{} ids, {} predictions, {} ground truths",
            sample_ids.len(),
            preds.len(),
            gts.len()
        )));
    }
    let images = sample_ids
        .iter()
        .zip(preds.iter().zip(gts))
        .map(|(id, (p, g))| {
            Ok(ImageAudit {
                sample_id: id.clone(),
                gt: classify(g, rules, class_map)?,
                pred: classify(p, rules, class_map)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pl: Vec<ImageLabel> = images.iter().map(|a| a.pred.label).collect();
    let gl: Vec<ImageLabel> = images.iter().map(|a| a.gt.label).collect();
    Ok(QcReport {
        product: rules.product.clone(),
        confusion: image_confusion(&pl, &gl)?,
        images,
    })
}
