//! The Peak Act activation and the reference activations it is compared
//! against. Peak Act is piecewise: 0.2x below zero, x² on [0,1), (x−2)² on
//! [1,2), and −0.2(x−2) from 2 up. It peaks at (1,1), maps zero to zero, and
//! keeps a narrow effective band so kernels respond selectively.

use std::io::Write;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    PeakAct,
    Sigmoid,
    ReLU,
    /// Slope must lie in (0, 1).
    LeakyReLU(f64),
}

pub fn peak_act(x: f64) -> f64 {
    if x < 0.0 {
        0.2 * x
    } else if x < 1.0 {
        x * x
    } else if x < 2.0 {
        (x - 2.0) * (x - 2.0)
    } else {
        -0.2 * (x - 2.0)
    }
}

/// Derivative of Peak Act. At the boundary points {0, 1, 2} the right-limit
/// branch applies: grad(0)=0, grad(1)=−2, grad(2)=−0.2. The −2 at x=1 pushes
/// overshooting values back toward the peak.
pub fn peak_act_grad(x: f64) -> f64 {
    if x < 0.0 {
        0.2
    } else if x < 1.0 {
        2.0 * x
    } else if x < 2.0 {
        2.0 * (x - 2.0)
    } else {
        -0.2
    }
}

pub fn apply(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::PeakAct => peak_act(x),
        ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        ActivationKind::ReLU => x.max(0.0),
        ActivationKind::LeakyReLU(s) => {
            if x >= 0.0 {
                x
            } else {
                s * x
            }
        }
    }
}

pub fn gradient(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::PeakAct => peak_act_grad(x),
        ActivationKind::Sigmoid => {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 - s)
        }
        ActivationKind::ReLU => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::LeakyReLU(s) => {
            if x >= 0.0 {
                1.0
            } else {
                s
            }
        }
    }
}

/// Index of the piecewise branch an input falls in; sigmoid is smooth and
/// always reports 0. Used for finite-difference kink detection.
pub fn branch_index(kind: ActivationKind, x: f64) -> u64 {
    match kind {
        ActivationKind::PeakAct => {
            if x < 0.0 {
                0
            } else if x < 1.0 {
                1
            } else if x < 2.0 {
                2
            } else {
                3
            }
        }
        ActivationKind::Sigmoid => 0,
        ActivationKind::ReLU | ActivationKind::LeakyReLU(_) => {
            if x < 0.0 {
                0
            } else {
                1
            }
        }
    }
}

/// Evenly spaced (x, f(x), f'(x)) samples for plotting.
pub fn dump_activation_samples(
    kind: ActivationKind,
    x_min: f64,
    x_max: f64,
    n: usize,
) -> Vec<(f64, f64, f64)> {
    assert!(n >= 2, "need at least two samples");
    let step = (x_max - x_min) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let x = x_min + step * i as f64;
            (x, apply(kind, x), gradient(kind, x))
        })
        .collect()
}

/// CSV rows "x,f,grad" with a header line.
pub fn write_samples_csv<W: Write>(w: &mut W, samples: &[(f64, f64, f64)]) -> Result<()> {
    writeln!(w, "x,f,grad")?;
    for (x, f, g) in samples {
        writeln!(w, "{},{},{}", x, f, g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn peak_act_anchor_values() {
        assert_eq!(peak_act(1.0), 1.0);
        assert_eq!(peak_act(0.0), 0.0);
        assert_eq!(peak_act(0.5), 0.25);
        assert_eq!(peak_act(1.5), 0.25);
        assert_eq!(peak_act(-1.0), -0.2);
        assert_eq!(peak_act(3.0), -0.2);
    }

    #[test]
    fn peak_act_continuous_at_boundaries() {
        for b in [0.0, 1.0, 2.0] {
            let eps = 1e-12;
            let left = peak_act(b - eps);
            let right = peak_act(b + eps);
            assert!((left - right).abs() < 1e-11, "jump at {}: {} vs {}", b, left, right);
            assert!((peak_act(b) - right).abs() < 1e-11);
        }
    }

    #[test]
    fn peak_act_bounded_above_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let x = rng.gen_range(-100.0..100.0);
            assert!(peak_act(x) <= 1.0, "f({}) = {} > 1", x, peak_act(x));
        }
    }

    #[test]
    fn peak_act_below_identity_on_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(f64::EPSILON..1.0);
            assert!(peak_act(x) < x);
        }
    }

    #[test]
    fn peak_act_grad_boundary_convention() {
        assert_eq!(peak_act_grad(0.5), 1.0);
        assert_eq!(peak_act_grad(0.0), 0.0);
        assert_eq!(peak_act_grad(1.0), -2.0);
        assert_eq!(peak_act_grad(2.0), -0.2);
    }

    #[test]
    fn peak_act_grad_matches_finite_differences_away_from_kinks() {
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 10_000 {
            let x: f64 = rng.gen_range(-3.0..5.0);
            if [0.0, 1.0, 2.0].iter().any(|k| (x - k).abs() < 10.0 * eps) {
                continue;
            }
            let numeric = (peak_act(x + eps) - peak_act(x - eps)) / (2.0 * eps);
            let analytic = peak_act_grad(x);
            assert!(
                (numeric - analytic).abs() < 1e-5,
                "x={}: analytic {} vs numeric {}",
                x,
                analytic,
                numeric
            );
            checked += 1;
        }
    }

    #[test]
    fn reference_activations() {
        assert_eq!(apply(ActivationKind::Sigmoid, 0.0), 0.5);
        assert_eq!(apply(ActivationKind::ReLU, -3.0), 0.0);
        let v = apply(ActivationKind::LeakyReLU(0.1), -2.0);
        assert!((v - -0.2).abs() < 1e-15);
    }

    #[test]
    fn sample_dump_matches_substitution_table() {
        let rows = dump_activation_samples(ActivationKind::PeakAct, -1.0, 3.0, 5);
        let expected_x = [-1.0, 0.0, 1.0, 2.0, 3.0];
        let expected_f = [-0.2, 0.0, 1.0, 0.0, -0.2];
        for ((x, f, _), (&ex, &ef)) in rows.iter().zip(expected_x.iter().zip(&expected_f)) {
            assert!((x - ex).abs() < 1e-12);
            assert!((f - ef).abs() < 1e-12, "f({}) = {}, expected {}", x, f, ef);
        }
    }

    #[test]
    fn sample_dump_two_points_gives_endpoints() {
        let rows = dump_activation_samples(ActivationKind::ReLU, -2.0, 2.0, 2);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, -2.0);
        assert_eq!(rows[1].0, 2.0);
    }

    #[test]
    fn sample_dump_x_is_monotone() {
        let rows = dump_activation_samples(ActivationKind::Sigmoid, -7.3, 4.1, 37);
        for pair in rows.windows(2) {
            assert!(pair[0].0 < pair[1].0);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &[(0.0, 0.0, 0.0), (1.0, 1.0, -2.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,f,grad");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "1,1,-2");
    }

    #[test]
    fn branch_index_partitions_peak_act() {
        assert_eq!(branch_index(ActivationKind::PeakAct, -0.1), 0);
        assert_eq!(branch_index(ActivationKind::PeakAct, 0.0), 1);
        assert_eq!(branch_index(ActivationKind::PeakAct, 1.0), 2);
        assert_eq!(branch_index(ActivationKind::PeakAct, 2.5), 3);
        assert_eq!(branch_index(ActivationKind::Sigmoid, -9.0), 0);
    }
}
