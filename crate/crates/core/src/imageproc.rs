//! Raster kernels shared by the detectors, the labeler and the evaluator.
//!
//! Every filter replicates edge pixels at the border and is computed row by
//! row in parallel; each output pixel depends only on its own window, so the
//! results do not depend on the thread count.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::raster::ScoreGrid;

/// Normalized 1D Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|w| w / sum).collect()
}

fn convolve_rows(src: &ScoreGrid, taps: &[f64]) -> ScoreGrid {
    let r = (taps.len() / 2) as isize;
    let mut out = ScoreGrid::zeros(src.width(), src.height());
    let w = src.width();
    out.as_mut_slice()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, w) in taps.iter().enumerate() {
                    acc += w * src.get_clamped(x as isize + k as isize - r, y as isize);
                }
                *o = acc;
            }
        });
    out
}

fn convolve_cols(src: &ScoreGrid, taps: &[f64]) -> ScoreGrid {
    let r = (taps.len() / 2) as isize;
    let mut out = ScoreGrid::zeros(src.width(), src.height());
    let w = src.width();
    out.as_mut_slice()
        .par_chunks_mut(w)
        .enumerate()
        .for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, w) in taps.iter().enumerate() {
                    acc += w * src.get_clamped(x as isize, y as isize + k as isize - r);
                }
                *o = acc;
            }
        });
    out
}

/// Clamps to the input's value range; removes last-bit overshoot from the
/// normalized sums.
fn clamp_to_range(mut out: ScoreGrid, range: (f64, f64)) -> ScoreGrid {
    for v in out.as_mut_slice() {
        *v = v.clamp(range.0, range.1);
    }
    out
}

fn check_odd(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "kernel size must be odd and positive, got {k}"
        )));
    }
    Ok(())
}

pub fn gaussian_blur(grid: &ScoreGrid, sigma: f64) -> Result<ScoreGrid> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let taps = gaussian_kernel(sigma);
    let out = convolve_cols(&convolve_rows(grid, &taps), &taps);
    Ok(clamp_to_range(out, grid.min_max()))
}

/// Mean over a `k`×`k` window.
pub fn box_blur(grid: &ScoreGrid, k: usize) -> Result<ScoreGrid> {
    check_odd(k)?;
    if k == 1 {
        return Ok(grid.clone());
    }
    let taps = vec![1.0 / k as f64; k];
    let out = convolve_cols(&convolve_rows(grid, &taps), &taps);
    Ok(clamp_to_range(out, grid.min_max()))
}

/// Minimum over a `k`×`k` window.
pub fn erode_min(grid: &ScoreGrid, k: usize) -> Result<ScoreGrid> {
    check_odd(k)?;
    let r = (k / 2) as isize;
    let pass = |src: &ScoreGrid, horizontal: bool| {
        let mut out = ScoreGrid::zeros(src.width(), src.height());
        let w = src.width();
        out.as_mut_slice()
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(y, row)| {
                for (x, o) in row.iter_mut().enumerate() {
                    let mut m = f64::INFINITY;
                    for d in -r..=r {
                        let v = if horizontal {
                            src.get_clamped(x as isize + d, y as isize)
                        } else {
                            src.get_clamped(x as isize, y as isize + d)
                        };
                        m = m.min(v);
                    }
                    *o = m;
                }
            });
        out
    };
    Ok(pass(&pass(grid, true), false))
}

pub fn difference_of_gaussians(grid: &ScoreGrid, sigma1: f64, sigma2: f64) -> Result<ScoreGrid> {
    if !(sigma1 > 0.0 && sigma1 < sigma2) {
        return Err(Error::InvalidArgument(format!(
            "DoG needs 0 < sigma1 < sigma2, got {sigma1}, {sigma2}"
        )));
    }
    let a = gaussian_blur(grid, sigma1)?;
    let b = gaussian_blur(grid, sigma2)?;
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x - y)
        .collect();
    ScoreGrid::from_vec(grid.width(), grid.height(), data)
}

/// Pixels that dominate their `(2 radius + 1)`² window.
///
/// A pixel survives when its value is at least `min_value`, no window
/// neighbour is strictly larger, and no equal neighbour precedes it in
/// `(y, x)` order. Output is in `(y, x)` order with the pixel value as
/// confidence.
pub fn local_maxima(grid: &ScoreGrid, radius: usize, min_value: f64) -> Vec<Detection> {
    let (w, h) = grid.dims();
    let r = radius.max(1);
    let rows: Vec<Vec<Detection>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut found = Vec::new();
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            for x in 0..w {
                let v = grid.get(x, y);
                if !(v >= min_value) {
                    continue;
                }
                let x0 = x.saturating_sub(r);
                let x1 = (x + r).min(w - 1);
                let mut keep = true;
                'win: for qy in y0..=y1 {
                    for qx in x0..=x1 {
                        let q = grid.get(qx, qy);
                        if q > v || (q == v && (qy, qx) < (y, x)) {
                            keep = false;
                            break 'win;
                        }
                    }
                }
                if keep {
                    found.push(Detection::new(x as u32, y as u32, v));
                }
            }
            found
        })
        .collect();
    rows.into_iter().flatten().collect()
}

/// Orders detections by confidence (descending), then `(y, x)`.
pub fn rank_detections(detections: &mut [Detection]) {
    detections.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then((a.y, a.x).cmp(&(b.y, b.x)))
    });
}

/// Greedy non-maximum suppression with a count cap.
///
/// Detections are visited strongest first; one is accepted unless an
/// accepted detection lies within Euclidean distance `radius`. Stops once
/// `cap` detections are accepted.
pub fn nms_cap(detections: &[Detection], radius: f64, cap: usize) -> Vec<Detection> {
    let mut order = detections.to_vec();
    rank_detections(&mut order);
    let reach = radius.max(0.0).floor() as i64;
    let r2 = radius * radius;
    let offsets: Vec<(i64, i64)> = (-reach..=reach)
        .flat_map(|dy| (-reach..=reach).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| ((dx * dx + dy * dy) as f64) <= r2)
        .collect();
    let mut taken: HashSet<(i64, i64)> = HashSet::new();
    let mut out = Vec::with_capacity(cap.min(order.len()));
    for d in order {
        if out.len() >= cap {
            break;
        }
        let (x, y) = (d.x as i64, d.y as i64);
        if offsets
            .iter()
            .any(|(dx, dy)| taken.contains(&(x + dx, y + dy)))
        {
            continue;
        }
        taken.insert((x, y));
        out.push(d);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, seed: u64) -> ScoreGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScoreGrid::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    #[test]
    fn blur_preserves_constants() {
        let g = ScoreGrid::filled(17, 11, 5.0);
        for s in [0.5, 1.0, 2.3] {
            let b = gaussian_blur(&g, s).unwrap();
            assert!(b.as_slice().iter().all(|v| (v - 5.0).abs() < 1e-9));
        }
        let b = box_blur(&g, 9).unwrap();
        assert!(b.as_slice().iter().all(|v| (v - 5.0).abs() < 1e-9));
    }

    #[test]
    fn gaussian_impulse_center_weight() {
        // Center of a separable normalized kernel: w0^2 with
        // w0 = 1 / sum_{i=-3..3} exp(-i^2/2).
        let norm: f64 = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).sum();
        let expected = (1.0 / norm).powi(2);
        let mut g = ScoreGrid::zeros(21, 21);
        g.set(10, 10, 1.0);
        let b = gaussian_blur(&g, 1.0).unwrap();
        assert!((b.get(10, 10) - expected).abs() < 1e-12);
        assert!((b.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn blur_rejects_bad_params() {
        let g = ScoreGrid::zeros(4, 4);
        assert!(gaussian_blur(&g, 0.0).is_err());
        assert!(box_blur(&g, 4).is_err());
        assert!(box_blur(&g, 0).is_err());
        assert!(erode_min(&g, 2).is_err());
        assert!(difference_of_gaussians(&g, 1.6, 1.0).is_err());
    }

    #[test]
    fn box_blur_window_arithmetic() {
        let mut g = ScoreGrid::zeros(9, 9);
        g.set(4, 4, 81.0);
        let b = box_blur(&g, 9).unwrap();
        // Every window holds the impulse exactly once; replicated border
        // copies are zeros.
        assert!(b.as_slice().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(box_blur(&g, 1).unwrap(), g);
    }

    #[test]
    fn erosion_spreads_zero() {
        let mut g = ScoreGrid::filled(30, 30, 10.0);
        g.set(15, 15, 0.0);
        let e = erode_min(&g, 9).unwrap();
        for y in 0..30 {
            for x in 0..30 {
                let inside = (11..=19).contains(&x) && (11..=19).contains(&y);
                assert_eq!(e.get(x, y), if inside { 0.0 } else { 10.0 });
            }
        }
        assert_eq!(erode_min(&g, 1).unwrap(), g);
    }

    #[test]
    fn dog_cases() {
        let g = ScoreGrid::filled(20, 20, 3.0);
        let d = difference_of_gaussians(&g, 1.0, 1.6).unwrap();
        assert!(d.as_slice().iter().all(|v| v.abs() < 1e-9));

        let mut g = ScoreGrid::zeros(31, 31);
        g.set(15, 15, 1.0);
        let d = difference_of_gaussians(&g, 1.0, 1.6).unwrap();
        // Kernel-difference oracle: G1(r) - G2(r) along a row through the
        // center, evaluated from the normalized separable taps.
        let k1 = gaussian_kernel(1.0);
        let k2 = gaussian_kernel(1.6);
        let tap = |k: &Vec<f64>, i: isize| {
            let r = (k.len() / 2) as isize;
            if i.abs() > r {
                0.0
            } else {
                k[(i + r) as usize]
            }
        };
        for dx in -6isize..=6 {
            let expected = tap(&k1, dx) * tap(&k1, 0) - tap(&k2, dx) * tap(&k2, 0);
            assert!((d.get((15 + dx) as usize, 15) - expected).abs() < 1e-12);
        }
        assert!(d.get(15, 15) > 0.0);
        assert!(d.get(18, 15) < 0.0);

        let g = random_grid(24, 18, 3);
        let a = difference_of_gaussians(&g.scale(3.0), 1.0, 1.6).unwrap();
        let b = difference_of_gaussians(&g, 1.0, 1.6).unwrap().scale(3.0);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn brute_maxima(g: &ScoreGrid, r: usize, min: f64) -> Vec<(u32, u32)> {
        let (w, h) = g.dims();
        let mut out = Vec::new();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let v = g.get(x as usize, y as usize);
                if v < min {
                    continue;
                }
                let mut ok = true;
                for qy in 0..h as i64 {
                    for qx in 0..w as i64 {
                        if (qx - x).abs().max((qy - y).abs()) > r as i64 || (qx, qy) == (x, y) {
                            continue;
                        }
                        let q = g.get(qx as usize, qy as usize);
                        if q > v || (q == v && (qy, qx) < (y, x)) {
                            ok = false;
                        }
                    }
                }
                if ok {
                    out.push((x as u32, y as u32));
                }
            }
        }
        out
    }

    #[test]
    fn local_maxima_cases() {
        let mut g = ScoreGrid::zeros(10, 10);
        g.set(4, 6, 1.0);
        let m = local_maxima(&g, 2, 0.5);
        assert_eq!(m, vec![Detection::new(4, 6, 1.0)]);

        let mut g = ScoreGrid::zeros(10, 10);
        g.set(4, 4, 1.0);
        g.set(5, 4, 1.0);
        let m = local_maxima(&g, 2, 0.5);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].x, m[0].y), (4, 4));

        for seed in 0..20 {
            // Quantized values so ties actually occur.
            let g = random_grid(23, 17, seed).map(|v| (v * 6.0).floor());
            let got: Vec<_> = local_maxima(&g, 2, 1.0)
                .iter()
                .map(|d| (d.x, d.y))
                .collect();
            assert_eq!(got, brute_maxima(&g, 2, 1.0));
        }
    }

    fn brute_greedy(dets: &[Detection], radius: f64, cap: usize) -> Vec<Detection> {
        let mut order = dets.to_vec();
        order.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then((a.y, a.x).cmp(&(b.y, b.x)))
        });
        let mut acc: Vec<Detection> = Vec::new();
        for d in order {
            if acc.len() == cap {
                break;
            }
            let close = acc.iter().any(|a| {
                let dx = a.x as f64 - d.x as f64;
                let dy = a.y as f64 - d.y as f64;
                (dx * dx + dy * dy).sqrt() <= radius
            });
            if !close {
                acc.push(d);
            }
        }
        acc
    }

    #[test]
    fn nms_cases() {
        assert!(nms_cap(&[], 2.0, 10).is_empty());
        let d = [Detection::new(3, 3, 0.5), Detection::new(3, 3, 0.9)];
        assert_eq!(nms_cap(&d, 2.0, 10), vec![Detection::new(3, 3, 0.9)]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dets: Vec<Detection> = (0..3000)
            .map(|_| {
                Detection::new(
                    rng.random_range(0..320),
                    rng.random_range(0..240),
                    (rng.random_range(0..1000) as f64) / 1000.0,
                )
            })
            .collect();
        let out = nms_cap(&dets, 2.0, 2000);
        assert!(out.len() <= 2000);
        assert_eq!(out, brute_greedy(&dets, 2.0, 2000));
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                let dx = a.x as f64 - b.x as f64;
                let dy = a.y as f64 - b.y as f64;
                assert!((dx * dx + dy * dy).sqrt() > 2.0);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn erosion_and_blur_bounds(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5, 9])) {
            let g = random_grid(19, 13, seed);
            let (lo, hi) = g.min_max();
            let e = erode_min(&g, k).unwrap();
            for (a, b) in e.as_slice().iter().zip(g.as_slice()) {
                prop_assert!(a <= b);
            }
            for out in [box_blur(&g, k).unwrap(), gaussian_blur(&g, 0.3 + k as f64 / 4.0).unwrap()] {
                for v in out.as_slice() {
                    prop_assert!(*v >= lo && *v <= hi);
                }
            }
        }

        #[test]
        fn nms_suppressed_are_covered(seed in any::<u64>(), radius in 0.5f64..6.0, cap in 0usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets: Vec<Detection> = (0..150)
                .map(|_| Detection::new(rng.random_range(0..40), rng.random_range(0..30), rng.random_range(0..20) as f64))
                .collect();
            let out = nms_cap(&dets, radius, cap);
            prop_assert!(out.len() <= cap.min(dets.len()));
            if out.len() < cap {
                for d in &dets {
                    let covered = out.iter().any(|a| {
                        let dx = a.x as f64 - d.x as f64;
                        let dy = a.y as f64 - d.y as f64;
                        (dx * dx + dy * dy).sqrt() <= radius && a.confidence >= d.confidence
                    });
                    prop_assert!(covered);
                }
            }
        }
    }
}
