//! Closed-form solution of the 1D constant-pressure filling problem.
//!
//! Behind the front the domain holds the injected fluid (`mu2`), ahead of it
//! the displaced one (`mu1`). With a uniform Darcy velocity
//! `v = k dp / (mu2 x_f + mu1 (l - x_f))` the front obeys
//! `(mu2 - mu1) x_f^2 / 2 + mu1 l x_f = k dp t`.

use crate::diffnet::NetworkParams;
use crate::error::{Error, Result};
use crate::flow::ProblemConfig;

/// Grid size used to bracket the 0.5 level set of `c`.
pub const FRONT_SCAN_POINTS: usize = 1001;
pub const FRONT_BISECTION_TOL: f64 = 1e-8;

/// Front position at time `t`.
pub fn front_position(t: f64, cfg: &ProblemConfig) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!(
            "front position needs t >= 0, got {t}"
        )));
    }
    let (mu_a, mu_r) = (cfg.mu1, cfg.mu2);
    let drive = cfg.k * (cfg.p_in - cfg.p_out);
    let dmu = mu_r - mu_a;
    if dmu.abs() < 1e-12 * mu_r.max(mu_a) {
        return Ok(drive * t / (mu_a * cfg.l));
    }
    let radicand = mu_a * mu_a * cfg.l * cfg.l + 2.0 * dmu * drive * t;
    if radicand < 0.0 {
        return Err(Error::Domain(format!(
            "front has left the domain before t = {t}"
        )));
    }
    // Rationalized form of (-mu_a l + sqrt(radicand)) / dmu; avoids the
    // cancellation for small t.
    Ok(2.0 * drive * t / (mu_a * cfg.l + radicand.sqrt()))
}

/// Uniform Darcy velocity while the front is at `x_f`.
pub fn darcy_velocity(x_f: f64, cfg: &ProblemConfig) -> f64 {
    cfg.k * (cfg.p_in - cfg.p_out) / (cfg.mu2 * x_f + cfg.mu1 * (cfg.l - x_f))
}

fn check_domain(x: f64, t: f64, cfg: &ProblemConfig) -> Result<()> {
    if !cfg.contains(x, t) {
        return Err(Error::Domain(format!(
            "({x}, {t}) outside [0, {}] x [0, {}]",
            cfg.l, cfg.t_end
        )));
    }
    Ok(())
}

/// Which side of the front a pressure evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PressureBranch {
    Injected,
    Displaced,
}

/// Piecewise-linear pressure with the branch forced, for continuity checks.
pub fn pressure_branch(x: f64, t: f64, branch: PressureBranch, cfg: &ProblemConfig) -> Result<f64> {
    let x_f = front_position(t, cfg)?;
    let (mu_a, mu_r) = (cfg.mu1, cfg.mu2);
    let dp = cfg.p_in - cfg.p_out;
    let denom = (mu_r - mu_a) * x_f + mu_a * cfg.l;
    Ok(match branch {
        PressureBranch::Injected => -mu_r * dp / denom * x + cfg.p_in,
        PressureBranch::Displaced => -mu_a * dp / denom * x + mu_a * dp / denom * cfg.l + cfg.p_out,
    })
}

pub fn pressure_exact(x: f64, t: f64, cfg: &ProblemConfig) -> Result<f64> {
    check_domain(x, t, cfg)?;
    let branch = if x < front_position(t, cfg)? {
        PressureBranch::Injected
    } else {
        PressureBranch::Displaced
    };
    pressure_branch(x, t, branch, cfg)
}

pub fn fraction_exact(x: f64, t: f64, cfg: &ProblemConfig) -> Result<f64> {
    Ok(if x < front_position(t, cfg)? {
        1.0
    } else {
        0.0
    })
}

/// Smallest `x` where `c(x, t)` crosses 0.5, or `None` when `c` stays on one
/// side over the whole domain.
pub fn front_from_model(
    c_net: &NetworkParams,
    t: f64,
    cfg: &ProblemConfig,
    grid_points: usize,
    tolerance: f64,
) -> Option<f64> {
    let xs = crate::flow::linspace(0.0, cfg.l, grid_points.max(2));
    let points: Vec<(f64, f64)> = xs.iter().map(|&x| (x, t)).collect();
    let values: Vec<f64> = c_net.samples(&points).iter().map(|s| s.value).collect();
    first_crossing(&xs, &values, |x| c_net.forward(x, t)[0], tolerance)
}

/// Level-set search on an arbitrary field over `[0, l]`.
pub fn front_from_field<F: Fn(f64) -> f64>(
    field: F,
    l: f64,
    grid_points: usize,
    tolerance: f64,
) -> Option<f64> {
    let xs = crate::flow::linspace(0.0, l, grid_points.max(2));
    let values: Vec<f64> = xs.iter().map(|&x| field(x)).collect();
    first_crossing(&xs, &values, field, tolerance)
}

fn first_crossing<F: Fn(f64) -> f64>(
    xs: &[f64],
    values: &[f64],
    field: F,
    tolerance: f64,
) -> Option<f64> {
    let side = |v: f64| v - 0.5;
    if side(values[0]) == 0.0 {
        return Some(xs[0]);
    }
    let i = (1..xs.len()).find(|&i| {
        side(values[i]) == 0.0 || side(values[i]).signum() != side(values[i - 1]).signum()
    })?;
    if side(values[i]) == 0.0 {
        return Some(xs[i]);
    }
    let s_lo = side(values[i - 1]).signum();
    let (mut lo, mut hi) = (xs[i - 1], xs[i]);
    while hi - lo > tolerance {
        let mid = 0.5 * (lo + hi);
        let sm = side(field(mid));
        if sm == 0.0 {
            return Some(mid);
        }
        if sm.signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference() -> ProblemConfig {
        ProblemConfig::default()
    }

    #[test]
    fn front_starts_at_inlet() {
        assert_eq!(front_position(0.0, &reference()).unwrap(), 0.0);
    }

    #[test]
    fn front_at_end_time() {
        // 40-digit evaluation of the closed form.
        let x = front_position(0.5, &reference()).unwrap();
        assert_relative_eq!(x, 0.999_994_999_987_500_1, max_relative = 1e-14);
        let x = front_position(0.125, &reference()).unwrap();
        assert_relative_eq!(x, 0.499_992_500_018_750_7, max_relative = 1e-14);
    }

    #[test]
    fn equal_viscosity_limit() {
        let cfg = ProblemConfig {
            mu1: 1.0,
            mu2: 1.0,
            ..reference()
        };
        assert_eq!(front_position(0.5, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn negative_time_is_rejected() {
        assert!(matches!(
            front_position(-0.1, &reference()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pressure_boundary_values() {
        let cfg = ProblemConfig {
            p_in: 1.5,
            p_out: 0.5,
            ..reference()
        };
        for t in [0.0, 0.1, 0.37, 0.5] {
            assert_relative_eq!(pressure_exact(0.0, t, &cfg).unwrap(), 1.5, epsilon = 1e-15);
            assert_relative_eq!(
                pressure_exact(cfg.l, t, &cfg).unwrap(),
                0.5,
                epsilon = 1e-12
            );
        }
        assert!(pressure_exact(1.1, 0.2, &cfg).is_err());
        assert!(pressure_exact(0.5, 0.6, &cfg).is_err());
    }

    #[test]
    fn pressure_branches_meet_at_front() {
        let cfg = reference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = rng.random_range(0.0..cfg.t_end);
            let x_f = front_position(t, &cfg).unwrap();
            let a = pressure_branch(x_f, t, PressureBranch::Injected, &cfg).unwrap();
            let b = pressure_branch(x_f, t, PressureBranch::Displaced, &cfg).unwrap();
            assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
        }
    }

    #[test]
    fn pressure_is_monotone_and_piecewise_linear() {
        let cfg = reference();
        for t in [0.05, 0.2, 0.45] {
            let x_f = front_position(t, &cfg).unwrap();
            let xs: Vec<f64> = (0..=400).map(|i| i as f64 / 400.0).collect();
            let ps: Vec<f64> = xs
                .iter()
                .map(|&x| pressure_exact(x, t, &cfg).unwrap())
                .collect();
            assert!(ps.windows(2).all(|w| w[1] <= w[0]));
            for i in 1..xs.len() - 1 {
                let same_side = (xs[i - 1] < x_f) == (xs[i + 1] < x_f);
                if same_side {
                    let second = ps[i - 1] - 2.0 * ps[i] + ps[i + 1];
                    assert!(second.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fraction_matches_front() {
        let cfg = reference();
        assert_eq!(fraction_exact(0.1, 0.5, &cfg).unwrap(), 1.0);
        assert_eq!(fraction_exact(0.3, 0.0, &cfg).unwrap(), 0.0);
        assert_eq!(fraction_exact(0.0, 0.2, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn level_set_of_steep_sigmoid() {
        let x = front_from_field(
            |x| 1.0 / (1.0 + (-100.0 * (0.4 - x)).exp()),
            1.0,
            FRONT_SCAN_POINTS,
            FRONT_BISECTION_TOL,
        )
        .unwrap();
        assert!((x - 0.4).abs() < 1e-6);
        assert_eq!(
            front_from_field(|_| 0.2, 1.0, FRONT_SCAN_POINTS, FRONT_BISECTION_TOL),
            None
        );
    }

    #[test]
    fn level_set_of_exact_fraction() {
        let cfg = reference();
        let t = 0.125;
        let x = front_from_field(
            |x| fraction_exact(x, t, &cfg).unwrap(),
            cfg.l,
            FRONT_SCAN_POINTS,
            FRONT_BISECTION_TOL,
        )
        .unwrap();
        let cell = cfg.l / (FRONT_SCAN_POINTS - 1) as f64;
        assert!((x - front_position(t, &cfg).unwrap()).abs() <= cell);
        assert!((x - 0.49999).abs() < 1e-3);
    }

    #[test]
    fn front_is_monotone_and_concave() {
        let cfg = reference();
        let ts: Vec<f64> = (0..1000).map(|i| cfg.t_end * i as f64 / 999.0).collect();
        let xs: Vec<f64> = ts
            .iter()
            .map(|&t| front_position(t, &cfg).unwrap())
            .collect();
        assert!(xs.windows(2).all(|w| w[1] >= w[0]));
        assert!(xs.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] <= 1e-15));
    }

    #[test]
    fn front_speed_is_darcy_velocity() {
        let cfg = reference();
        let h = 1e-6;
        for t in [0.01, 0.1, 0.25, 0.4] {
            let fd = (front_position(t + h, &cfg).unwrap() - front_position(t - h, &cfg).unwrap())
                / (2.0 * h);
            let v = darcy_velocity(front_position(t, &cfg).unwrap(), &cfg);
            assert!(((fd - v) / v).abs() < 1e-6, "t={t}: {fd} vs {v}");
        }
    }
}
