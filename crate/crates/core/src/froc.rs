//! Free-response evaluation: greedy matching, FROC curves, sensitivity at
//! fixed false-positive rates and per-diameter-bucket sensitivity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detection::{iou, BoundingBox, Detection};
use crate::{Error, Result};

/// A ground-truth lesion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    #[serde(rename = "box", with = "box_array")]
    pub bbox: BoundingBox,
    pub diameter_mm: f64,
}

pub(crate) mod box_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::detection::BoundingBox;

    pub fn serialize<S: Serializer>(b: &BoundingBox, s: S) -> Result<S::Ok, S::Error> {
        [b.x_min, b.y_min, b.x_max, b.y_max].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BoundingBox, D::Error> {
        let [a, b, c, e] = <[f64; 4]>::deserialize(d)?;
        BoundingBox::new(a, b, c, e).map_err(serde::de::Error::custom)
    }
}

pub const DEFAULT_MATCH_IOU: f64 = 0.5;
pub const DEFAULT_FP_RATES: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];

/// Detections and annotations of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub annotations: Vec<Annotation>,
}

/// Groups flat detection and annotation lists by image. Every id in
/// `image_ids`, `detections` or `annotations` yields one entry, sorted by id.
pub fn group_by_image(
    image_ids: &[String],
    detections: &[Detection],
    annotations: &[Annotation],
) -> Vec<ImageEval> {
    let mut map: BTreeMap<String, ImageEval> = BTreeMap::new();
    let mut entry = |id: &str| {
        map.entry(id.to_string()).or_insert_with(|| ImageEval {
            image_id: id.to_string(),
            ..ImageEval::default()
        });
    };
    for id in image_ids {
        entry(id);
    }
    for d in detections {
        entry(&d.image_id);
    }
    for a in annotations {
        entry(&a.image_id);
    }
    for d in detections {
        map.get_mut(&d.image_id).expect("inserted").detections.push(d.clone());
    }
    for a in annotations {
        map.get_mut(&a.image_id).expect("inserted").annotations.push(a.clone());
    }
    map.into_values().collect()
}

/// Outcome of matching one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatch {
    /// Per detection (input order): true positive?
    pub is_true_positive: Vec<bool>,
    /// Per annotation: index of the detection that matched it.
    pub matched_by: Vec<Option<usize>>,
}

/// Indices sorted by descending score, input order on ties.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching in descending score order: each detection takes the
/// unmatched annotation of highest IoU (lowest index on ties) if that IoU
/// reaches `iou_threshold`; otherwise it is a false positive.
pub fn match_detections(
    detections: &[Detection],
    annotations: &[Annotation],
    iou_threshold: f64,
) -> ImageMatch {
    let mut is_tp = vec![false; detections.len()];
    let mut matched_by = vec![None; annotations.len()];
    for d in score_order(detections) {
        let mut best: Option<(usize, f64)> = None;
        for (g, ann) in annotations.iter().enumerate() {
            if matched_by[g].is_some() {
                continue;
            }
            let v = iou(&detections[d].bbox, &ann.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched_by[g] = Some(d);
            is_tp[d] = true;
        }
    }
    ImageMatch {
        is_true_positive: is_tp,
        matched_by,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Detections scoring at or above this are kept.
    pub threshold: f64,
    pub fp_per_image: f64,
    pub sensitivity: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// One point per distinct score, by descending threshold.
    pub points: Vec<OperatingPoint>,
    pub num_images: usize,
    pub num_annotations: usize,
}

struct Scored {
    score: f64,
    image: usize,
    index: usize,
    tp: bool,
}

fn scored_detections(images: &[ImageEval], iou_threshold: f64) -> (Vec<Scored>, Vec<ImageMatch>) {
    let matches: Vec<ImageMatch> = images
        .iter()
        .map(|im| match_detections(&im.detections, &im.annotations, iou_threshold))
        .collect();
    let mut all = Vec::new();
    for (i, (im, m)) in images.iter().zip(&matches).enumerate() {
        for (k, d) in im.detections.iter().enumerate() {
            all.push(Scored {
                score: d.score,
                image: i,
                index: k,
                tp: m.is_true_positive[k],
            });
        }
    }
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| images[a.image].image_id.cmp(&images[b.image].image_id))
            .then(a.image.cmp(&b.image))
            .then(a.index.cmp(&b.index))
    });
    (all, matches)
}

/// Sweeps every distinct detection score as a threshold.
pub fn froc(images: &[ImageEval], iou_threshold: f64) -> Result<FrocCurve> {
    if images.is_empty() {
        return Err(Error::Undefined("FROC needs at least one image".into()));
    }
    let total: usize = images.iter().map(|im| im.annotations.len()).sum();
    if total == 0 {
        return Err(Error::Undefined(
            "sensitivity is undefined without any annotation".into(),
        ));
    }
    let (scored, _) = scored_detections(images, iou_threshold);
    let n_images = images.len() as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].score;
        while i < scored.len() && scored[i].score == s {
            if scored[i].tp {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint {
            threshold: s,
            fp_per_image: fp as f64 / n_images,
            sensitivity: tp as f64 / total as f64,
            true_positives: tp,
            false_positives: fp,
        });
    }
    Ok(FrocCurve {
        points,
        num_images: images.len(),
        num_annotations: total,
    })
}

/// How sensitivity is read off the curve at a given FP rate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// Best sensitivity among points with `fp_per_image <= rate`.
    #[default]
    Step,
    /// Linear interpolation of the step envelope, starting from `(0, 0)`.
    Interpolate,
}

pub fn sensitivity_at(curve: &FrocCurve, fp_rates: &[f64], mode: SensitivityMode) -> Vec<f64> {
    let step = |rate: f64| {
        curve
            .points
            .iter()
            .filter(|p| p.fp_per_image <= rate)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max)
    };
    match mode {
        SensitivityMode::Step => fp_rates.iter().map(|&r| step(r)).collect(),
        SensitivityMode::Interpolate => {
            // envelope: (fp, best sensitivity at that fp), fp strictly increasing
            let mut env: Vec<(f64, f64)> = vec![(0.0, step(0.0))];
            for p in &curve.points {
                let s = step(p.fp_per_image);
                match env.last_mut() {
                    Some(last) if last.0 == p.fp_per_image => last.1 = s,
                    _ => env.push((p.fp_per_image, s)),
                }
            }
            fp_rates
                .iter()
                .map(|&r| {
                    let k = env.partition_point(|&(fp, _)| fp <= r);
                    if k == env.len() {
                        env[k - 1].1
                    } else {
                        let (x0, y0) = env[k - 1];
                        let (x1, y1) = env[k];
                        y0 + (y1 - y0) * (r - x0) / (x1 - x0)
                    }
                })
                .collect()
        }
    }
}

/// Lesion-diameter classes in millimetres, as half-open intervals
/// `[edge_i, edge_{i+1})` covering `(0, ∞)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub edges: Vec<f64>,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        Self {
            edges: vec![10.0, 30.0, 60.0, 100.0],
        }
    }
}

impl SizeBuckets {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.iter().any(|e| !(e.is_finite() && *e > 0.0)) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "bucket edges must be positive and strictly increasing: {edges:?}"
            )));
        }
        Ok(Self { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bucket_of(&self, diameter_mm: f64) -> usize {
        self.edges.partition_point(|&e| e <= diameter_mm)
    }

    pub fn label(&self, k: usize) -> String {
        let n = self.edges.len();
        if k == 0 {
            format!("<{}", self.edges[0])
        } else if k == n {
            format!(">{}", self.edges[n - 1])
        } else {
            format!("{}-{}", self.edges[k - 1], self.edges[k])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSensitivity {
    pub label: String,
    pub matched: usize,
    pub total: usize,
    /// `None` when the bucket holds no annotation.
    pub sensitivity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub fp_rate: f64,
    /// Score threshold of the chosen operating point (`inf` if none qualifies).
    pub threshold: f64,
    pub buckets: Vec<BucketSensitivity>,
}

/// Fixes one global threshold (the lowest whose FP rate is within
/// `fp_rate`) and reports matched/total per diameter bucket.
pub fn size_bucketed_sensitivity(
    images: &[ImageEval],
    buckets: &SizeBuckets,
    fp_rate: f64,
    iou_threshold: f64,
) -> Result<BucketReport> {
    let curve = froc(images, iou_threshold)?;
    let threshold = curve
        .points
        .iter()
        .rev()
        .find(|p| p.fp_per_image <= fp_rate)
        .map_or(f64::INFINITY, |p| p.threshold);
    let mut matched = vec![0usize; buckets.len()];
    let mut total = vec![0usize; buckets.len()];
    for im in images {
        let m = match_detections(&im.detections, &im.annotations, iou_threshold);
        for (ann, hit) in im.annotations.iter().zip(&m.matched_by) {
            if !(ann.diameter_mm.is_finite() && ann.diameter_mm > 0.0) {
                return Err(Error::config(format!(
                    "annotation on {} has invalid diameter {}",
                    ann.image_id, ann.diameter_mm
                )));
            }
            let k = buckets.bucket_of(ann.diameter_mm);
            total[k] += 1;
            if hit.is_some_and(|d| im.detections[d].score >= threshold) {
                matched[k] += 1;
            }
        }
    }
    let buckets = (0..buckets.len())
        .map(|k| BucketSensitivity {
            label: buckets.label(k),
            matched: matched[k],
            total: total[k],
            sensitivity: (total[k] > 0).then(|| matched[k] as f64 / total[k] as f64),
        })
        .collect();
    Ok(BucketReport {
        fp_rate,
        threshold,
        buckets,
    })
}

/// Everything an evaluation run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrocReport {
    pub iou_threshold: f64,
    pub mode: SensitivityMode,
    pub fp_rates: Vec<f64>,
    pub sensitivities: Vec<f64>,
    pub size_buckets: BucketReport,
    pub curve: FrocCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub fp_rates: Vec<f64>,
    pub mode: SensitivityMode,
    pub buckets: SizeBuckets,
    pub bucket_fp_rate: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_MATCH_IOU,
            fp_rates: DEFAULT_FP_RATES.to_vec(),
            mode: SensitivityMode::Step,
            buckets: SizeBuckets::default(),
            bucket_fp_rate: 4.0,
        }
    }
}

pub fn evaluate(images: &[ImageEval], opts: &EvalOptions) -> Result<FrocReport> {
    let curve = froc(images, opts.iou_threshold)?;
    let sensitivities = sensitivity_at(&curve, &opts.fp_rates, opts.mode);
    let size_buckets =
        size_bucketed_sensitivity(images, &opts.buckets, opts.bucket_fp_rate, opts.iou_threshold)?;
    Ok(FrocReport {
        iou_threshold: opts.iou_threshold,
        mode: opts.mode,
        fp_rates: opts.fp_rates.clone(),
        sensitivities,
        size_buckets,
        curve,
    })
}

impl FrocReport {
    /// Plain-text tables: sensitivity per FP rate, then per diameter bucket.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "images: {}  annotations: {}  match IoU >= {}",
            self.curve.num_images, self.curve.num_annotations, self.iou_threshold
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "Sensitivity at FPs per image");
        let mut head = String::from("FPs/image   ");
        let mut row = String::from("sensitivity ");
        for (r, v) in self.fp_rates.iter().zip(&self.sensitivities) {
            let _ = write!(head, "{:>8}", r);
            let _ = write!(row, "{:>8.3}", v);
        }
        let _ = writeln!(s, "{}", head.trim_end());
        let _ = writeln!(s, "{}", row.trim_end());
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Sensitivity at {} FPs per image by lesion diameter (mm)",
            self.size_buckets.fp_rate
        );
        let mut head = String::from("diameter    ");
        let mut row = String::from("sensitivity ");
        let mut counts = String::from("matched     ");
        for b in &self.size_buckets.buckets {
            let _ = write!(head, "{:>9}", b.label);
            match b.sensitivity {
                Some(v) => {
                    let _ = write!(row, "{:>9.3}", v);
                }
                None => {
                    let _ = write!(row, "{:>9}", "-");
                }
            }
            let _ = write!(counts, "{:>9}", format!("{}/{}", b.matched, b.total));
        }
        let _ = writeln!(s, "{}", head.trim_end());
        let _ = writeln!(s, "{}", row.trim_end());
        let _ = writeln!(s, "{}", counts.trim_end());
        s
    }
}
