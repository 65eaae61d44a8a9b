//! Training losses with analytic gradients with respect to the raw
//! prediction grids.
//!
//! Values and gradients are always computed in `f64`, whatever the storage
//! type of the inputs. Sums run sequentially in row-major order so results
//! are reproducible bit for bit.

use thiserror::Error;

use crate::types::{ensure_same_dims, BoolGrid, Grid, LabelMap, ShapeError, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_heatmap: f64,
    pub lambda_offset: f64,
    /// Fraction of valid pixels kept by the bootstrapped cross-entropy.
    pub top_k_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_heatmap: 200.0,
            lambda_offset: 0.01,
            top_k_fraction: 0.15,
        }
    }
}

/// A scalar loss and, optionally, its gradient laid out like the prediction
/// (pixel-major, channels or vector components innermost).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        LossValue {
            value,
            gradient: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("every pixel carries the ignore label; the loss is undefined")]
    NoValidPixels,
    #[error("pixel {index}: label {label} has no logit channel (only {channels})")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        channels: usize,
    },
    #[error("top_k_fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("pixel {index}: weight {weight} is negative or not finite")]
    InvalidWeight { index: usize, weight: f64 },
}

/// Per-pixel weighted cross-entropy losses, `None` at ignored pixels.
fn per_pixel_ce<T, W>(
    logits: &Volume<T>,
    labels: &LabelMap,
    weights: &Grid<W>,
    ignore_label: u32,
) -> Result<Vec<Option<f64>>, LossError>
where
    T: Copy + Into<f64>,
    W: Copy + Into<f64>,
{
    ensure_same_dims(labels.dims(), logits.dims())?;
    ensure_same_dims(labels.dims(), weights.dims())?;
    let channels = logits.channels();
    labels
        .as_slice()
        .iter()
        .zip(weights.as_slice())
        .enumerate()
        .map(|(index, (&label, &w))| {
            if label == ignore_label {
                return Ok(None);
            }
            if label as usize >= channels {
                return Err(LossError::LabelOutOfRange {
                    index,
                    label,
                    channels,
                });
            }
            let w: f64 = w.into();
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::InvalidWeight { index, weight: w });
            }
            let px = logits.pixel(index);
            Ok(Some(w * (log_sum_exp(px) - px[label as usize].into())))
        })
        .collect()
}

fn log_sum_exp<T: Copy + Into<f64>>(xs: &[T]) -> f64 {
    let m = xs
        .iter()
        .map(|&x| x.into())
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|&x| (x.into() - m).exp()).sum();
    m + s.ln()
}

/// Indices of the `ceil(fraction * n)` largest losses. Ties at the cut are
/// resolved in row-major order. Returned sorted by pixel index.
pub(crate) fn bootstrap_selection(losses: &[Option<f64>], fraction: f64) -> Vec<usize> {
    let mut valid: Vec<(usize, f64)> = losses
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .collect();
    let k = ((fraction * valid.len() as f64).ceil() as usize).clamp(1, valid.len());
    valid.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = valid[..k].iter().map(|&(i, _)| i).collect();
    picked.sort_unstable();
    picked
}

/// Weighted bootstrapped cross-entropy: the mean of the hardest
/// `top_k_fraction` of per-pixel weighted cross-entropies.
///
/// `logits` channel `c` scores category id `c`. The gradient is laid out like
/// `logits` and is zero outside the selected pixels.
pub fn weighted_bootstrapped_ce<T, W>(
    logits: &Volume<T>,
    labels: &LabelMap,
    weights: &Grid<W>,
    ignore_label: u32,
    top_k_fraction: f64,
) -> Result<LossValue, LossError>
where
    T: Copy + Into<f64>,
    W: Copy + Into<f64>,
{
    if !(top_k_fraction > 0.0 && top_k_fraction <= 1.0) {
        return Err(LossError::InvalidFraction(top_k_fraction));
    }
    let losses = per_pixel_ce(logits, labels, weights, ignore_label)?;
    if losses.iter().all(Option::is_none) {
        return Err(LossError::NoValidPixels);
    }
    let selected = bootstrap_selection(&losses, top_k_fraction);
    let k = selected.len() as f64;
    let value = selected
        .iter()
        .map(|&i| losses[i].expect("selected pixels are valid"))
        .sum::<f64>()
        / k;

    let channels = logits.channels();
    let mut grad = vec![0.0; logits.as_slice().len()];
    for &i in &selected {
        let px = logits.pixel(i);
        let w: f64 = weights.as_slice()[i].into();
        let lse = log_sum_exp(px);
        let label = labels.as_slice()[i] as usize;
        let g = &mut grad[i * channels..(i + 1) * channels];
        for (c, slot) in g.iter_mut().enumerate() {
            let p = (px[c].into() - lse).exp();
            let onehot = if c == label { 1.0 } else { 0.0 };
            *slot = w * (p - onehot) / k;
        }
    }
    Ok(LossValue {
        value,
        gradient: Some(grad),
    })
}

/// Mean squared error over all pixels.
pub fn mse_heatmap_loss<P, T>(pred: &Grid<P>, target: &Grid<T>) -> Result<LossValue, LossError>
where
    P: Copy + Into<f64>,
    T: Copy + Into<f64>,
{
    ensure_same_dims(target.dims(), pred.dims())?;
    let n = pred.dims().len() as f64;
    let mut value = 0.0;
    let grad = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| {
            let d = p.into() - t.into();
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(LossValue {
        value: value / n,
        gradient: Some(grad),
    })
}

/// L1 offset loss restricted to `thing_mask`, normalised by the number of
/// masked pixels. An empty mask gives zero.
pub fn l1_offset_loss<P, T>(
    pred: &Grid<[P; 2]>,
    target: &Grid<[T; 2]>,
    thing_mask: &BoolGrid,
) -> Result<LossValue, LossError>
where
    P: Copy + Into<f64>,
    T: Copy + Into<f64>,
{
    ensure_same_dims(target.dims(), pred.dims())?;
    ensure_same_dims(target.dims(), thing_mask.dims())?;
    let count = thing_mask.as_slice().iter().filter(|&&m| m).count();
    let norm = count.max(1) as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; 2 * pred.dims().len()];
    for (i, ((p, t), &m)) in pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .zip(thing_mask.as_slice())
        .enumerate()
    {
        if !m {
            continue;
        }
        for axis in 0..2 {
            let d = p[axis].into() - t[axis].into();
            sum += d.abs();
            grad[2 * i + axis] = if d > 0.0 {
                1.0 / norm
            } else if d < 0.0 {
                -1.0 / norm
            } else {
                0.0
            };
        }
    }
    Ok(LossValue {
        value: sum / norm,
        gradient: Some(grad),
    })
}

/// Weighted sum of the three losses. The semantic term carries its weights
/// inside the per-pixel weight map, so it enters with coefficient 1.
pub fn total_loss(sem: &LossValue, heat: &LossValue, off: &LossValue, w: &LossWeights) -> f64 {
    sem.value + w.lambda_heatmap * heat.value + w.lambda_offset * off.value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::central_difference;
    use crate::types::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(h: usize, w: usize) -> Dims {
        Dims::new(h, w).unwrap()
    }

    #[test]
    fn ce_near_perfect_predictions() {
        let d = dims(2, 3);
        let c = 4;
        let labels = LabelMap::from_fn(d, |r, col| ((r + col) % c) as u32);
        let mut logits = vec![0.0f64; d.len() * c];
        for (i, &l) in labels.as_slice().iter().enumerate() {
            logits[i * c + l as usize] = 50.0;
        }
        let logits = Volume::from_vec(d, c, logits).unwrap();
        let w = Grid::filled(d, 1.0f64);
        let v = weighted_bootstrapped_ce(&logits, &labels, &w, 255, 0.15).unwrap();
        assert!(v.value < 1e-9, "{}", v.value);
    }

    #[test]
    fn ce_uniform_logits_is_log_c() {
        let d = dims(4, 4);
        for c in [2usize, 5, 19] {
            let logits = Volume::from_vec(d, c, vec![0.3f64; d.len() * c]).unwrap();
            let labels = LabelMap::from_fn(d, |r, col| ((r * 4 + col) % c) as u32);
            let w = Grid::filled(d, 1.0f32);
            let v = weighted_bootstrapped_ce(&logits, &labels, &w, 255, 1.0).unwrap();
            assert!((v.value - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_top_half_of_four_losses() {
        // Per-pixel loss = weight * ln 2 for two uniform logits; pick weights
        // so the weighted losses are {0.1, 0.4, 0.2, 0.3}.
        let d = dims(1, 4);
        let targets = [0.1, 0.4, 0.2, 0.3];
        let ln2 = 2f64.ln();
        let w = Grid::from_vec(d, targets.iter().map(|t| t / ln2).collect()).unwrap();
        let logits = Volume::from_vec(d, 2, vec![0.0f64; 8]).unwrap();
        let labels = LabelMap::filled(d, 0);
        let v = weighted_bootstrapped_ce(&logits, &labels, &w, 255, 0.5).unwrap();
        // Oracle: sort descending, average the first ceil(0.5 * 4) = 2.
        let mut sorted = targets.to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let oracle = (sorted[0] + sorted[1]) / 2.0;
        assert!((oracle - 0.35).abs() < 1e-15);
        assert!((v.value - oracle).abs() < 1e-12);
        let g = v.gradient.unwrap();
        assert!(g[0] == 0.0 && g[1] == 0.0 && g[4] == 0.0 && g[5] == 0.0);
        assert!(g[2] != 0.0 && g[6] != 0.0);
    }

    #[test]
    fn ce_ties_resolved_row_major() {
        let losses = vec![Some(1.0), Some(2.0), Some(1.0), None, Some(1.0)];
        // 4 valid, fraction 0.5 -> K = 2: the 2.0 and the first 1.0.
        assert_eq!(bootstrap_selection(&losses, 0.5), vec![0, 1]);
        assert_eq!(bootstrap_selection(&losses, 0.01), vec![1]);
    }

    #[test]
    fn ce_errors() {
        let d = dims(1, 2);
        let logits = Volume::from_vec(d, 2, vec![0.0f64; 4]).unwrap();
        let w = Grid::filled(d, 1.0f64);
        let all_ignored = LabelMap::filled(d, 255);
        assert_eq!(
            weighted_bootstrapped_ce(&logits, &all_ignored, &w, 255, 0.5),
            Err(LossError::NoValidPixels)
        );
        let bad = LabelMap::filled(d, 7);
        assert!(matches!(
            weighted_bootstrapped_ce(&logits, &bad, &w, 255, 0.5),
            Err(LossError::LabelOutOfRange { label: 7, .. })
        ));
        let ok = LabelMap::filled(d, 1);
        assert!(matches!(
            weighted_bootstrapped_ce(&logits, &ok, &w, 255, 0.0),
            Err(LossError::InvalidFraction(_))
        ));
        let wrong = LabelMap::filled(dims(2, 1), 1);
        assert!(matches!(
            weighted_bootstrapped_ce(&logits, &wrong, &w, 255, 0.5),
            Err(LossError::Shape(_))
        ));
    }

    #[test]
    fn ce_full_fraction_equals_plain_weighted_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = dims(5, 6);
        let c = 4;
        let logits: Vec<f64> = (0..d.len() * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = LabelMap::from_fn(d, |_, _| {
            if rng.random_bool(0.2) {
                255
            } else {
                rng.random_range(0..c as u32)
            }
        });
        let w = Grid::from_fn(d, |_, _| rng.random_range(0.0..3.0f64));
        let vol = Volume::from_vec(d, c, logits.clone()).unwrap();
        let v = weighted_bootstrapped_ce(&vol, &labels, &w, 255, 1.0).unwrap();
        // Brute force: direct softmax probabilities, no log-sum-exp trick.
        let mut sum = 0.0;
        let mut n = 0;
        for i in 0..d.len() {
            let l = labels.as_slice()[i];
            if l == 255 {
                continue;
            }
            let px = &logits[i * c..(i + 1) * c];
            let z: f64 = px.iter().map(|x| x.exp()).sum();
            sum += w.as_slice()[i] * -(px[l as usize].exp() / z).ln();
            n += 1;
        }
        assert!(((sum / n as f64) - v.value).abs() < 1e-12);
    }

    #[test]
    fn mse_examples() {
        let d = dims(3, 5);
        let t = Grid::from_fn(d, |r, c| (r * c) as f64 / 10.0);
        assert_eq!(mse_heatmap_loss(&t, &t).unwrap().value, 0.0);
        let zero = Grid::filled(d, 0.0f32);
        let mut one = Grid::filled(d, 0.0f32);
        one[(1, 1)] = 1.0;
        let v = mse_heatmap_loss(&zero, &one).unwrap();
        assert!((v.value - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = dims(8, 8);
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = Grid::from_fn(d, |_, _| rng.random_range(0.0..1.0f64));
        let analytic = mse_heatmap_loss(&Grid::from_vec(d, pred.clone()).unwrap(), &target)
            .unwrap()
            .gradient
            .unwrap();
        let f = |x: &[f64]| {
            mse_heatmap_loss(&Grid::from_vec(d, x.to_vec()).unwrap(), &target)
                .unwrap()
                .value
        };
        let numeric = central_difference(f, &pred, 1e-4);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() <= 1e-5 * a.abs().max(n.abs()).max(1e-8));
        }
    }

    #[test]
    fn l1_examples() {
        let d = dims(2, 2);
        let t = Grid::filled(d, [1.0f64, 2.0]);
        let mut mask = BoolGrid::filled(d, false);
        assert_eq!(l1_offset_loss(&t, &t, &mask).unwrap().value, 0.0);
        mask[(0, 1)] = true;
        let mut p = t.clone();
        p[(0, 1)] = [2.0, 0.0];
        let v = l1_offset_loss(&p, &t, &mask).unwrap();
        assert_eq!(v.value, 3.0);
        assert_eq!(v.gradient.unwrap(), vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);

        // Stuff pixels do not contribute.
        let mut q = p.clone();
        q[(1, 0)] = [100.0, -40.0];
        assert_eq!(l1_offset_loss(&q, &t, &mask).unwrap().value, 3.0);

        let empty = BoolGrid::filled(d, false);
        assert_eq!(l1_offset_loss(&q, &t, &empty).unwrap().value, 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let z = LossValue::scalar(0.0);
        assert_eq!(total_loss(&z, &z, &z, &w), 0.0);
        let t = total_loss(
            &LossValue::scalar(1.0),
            &LossValue::scalar(0.01),
            &LossValue::scalar(100.0),
            &w,
        );
        assert!((t - 4.0).abs() < 1e-12);
        let bumped = total_loss(
            &LossValue::scalar(1.0),
            &LossValue::scalar(0.01),
            &LossValue::scalar(100.5),
            &w,
        );
        assert!(bumped > t);
    }
}
