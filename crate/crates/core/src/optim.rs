//! Box-constrained minimisation by grid search followed by a projected
//! Nelder–Mead simplex.
//!
//! Both stages work in unit coordinates `u ∈ [0, 1]^q`, `ϑ = lower + u·(upper − lower)`,
//! so the simplex tolerance is relative to the box widths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::ParameterBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter box is degenerate: {0}")]
    EmptyBox(String),
    #[error("objective is not finite at {theta:?}")]
    NonFinite { theta: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Grid nodes per axis in the first stage.
    pub grid_points: usize,
    /// Simplex diameter (unit coordinates) at which refinement stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            grid_points: 33,
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grid_x: Vec<f64>,
    pub grid_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;

struct UnitMap<'a> {
    lower: &'a [f64],
    upper: &'a [f64],
}

impl UnitMap<'_> {
    fn to_theta(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 1.0 {
                    self.upper[i]
                } else {
                    self.lower[i] + (self.upper[i] - self.lower[i]) * v
                }
            })
            .collect()
    }
}

fn grid_unit(points: usize, dim: usize, index: usize) -> Vec<f64> {
    let mut rem = index;
    let mut u = vec![0.0; dim];
    for axis in (0..dim).rev() {
        let i = rem % points;
        rem /= points;
        u[axis] = if points <= 1 { 0.5 } else { i as f64 / (points - 1) as f64 };
    }
    u
}

fn project(u: &mut [f64]) {
    for v in u {
        *v = v.clamp(0.0, 1.0);
    }
}

fn diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut d: f64 = 0.0;
    for (i, a) in simplex.iter().enumerate() {
        for b in &simplex[i + 1..] {
            let dist = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            d = d.max(dist);
        }
    }
    d
}

/// Minimises `f` over `bounds`. Grid ties go to the smallest lexicographic
/// index; the returned point is the best one evaluated in either stage.
pub fn minimize_on_box<F>(f: F, bounds: &ParameterBox, opts: &SearchOptions) -> Result<SearchResult, OptimError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let (lower, upper) = (bounds.lower(), bounds.upper());
    if lower.is_empty() || lower.len() != upper.len() || lower.iter().zip(upper).any(|(l, h)| !(l < h)) {
        return Err(OptimError::EmptyBox(format!("{lower:?} .. {upper:?}")));
    }
    let q = lower.len();
    let map = UnitMap { lower, upper };
    let eval = |u: &[f64]| -> Result<f64, OptimError> {
        let theta = map.to_theta(u);
        let v = f(&theta);
        if v.is_nan() {
            Err(OptimError::NonFinite { theta })
        } else {
            Ok(v)
        }
    };

    let points = opts.grid_points.max(1);
    let len = points.pow(q as u32);
    let values: Vec<f64> = (0..len)
        .into_par_iter()
        .map(|i| eval(&grid_unit(points, q, i)))
        .collect::<Result<_, _>>()?;
    let mut best_index = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best_index] {
            best_index = i;
        }
    }
    let grid_u = grid_unit(points, q, best_index);
    let grid_value = values[best_index];

    let spacing = if points > 1 { 1.0 / (points - 1) as f64 } else { 0.5 };
    let mut simplex = vec![grid_u.clone()];
    for axis in 0..q {
        let mut v = grid_u.clone();
        v[axis] = if v[axis] + spacing <= 1.0 { v[axis] + spacing } else { v[axis] - spacing };
        simplex.push(v);
    }
    let mut fvals = simplex.iter().map(|u| eval(u)).collect::<Result<Vec<_>, _>>()?;
    let mut best = (grid_u.clone(), grid_value);
    let note = |u: &[f64], v: f64, best: &mut (Vec<f64>, f64)| {
        if v < best.1 {
            *best = (u.to_vec(), v);
        }
    };
    for (u, v) in simplex.iter().zip(&fvals) {
        note(u, *v, &mut best);
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=q).collect();
        order.sort_by(|&a, &b| fvals[a].total_cmp(&fvals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fvals = order.iter().map(|&i| fvals[i]).collect();
        if diameter(&simplex) < opts.tol || fvals[0] == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;

        let worst = q;
        let centroid: Vec<f64> = (0..q)
            .map(|j| simplex[..worst].iter().map(|v| v[j]).sum::<f64>() / q as f64)
            .collect();
        let along = |t: f64| {
            let mut p: Vec<f64> = centroid.iter().zip(&simplex[worst]).map(|(c, w)| c + t * (c - w)).collect();
            project(&mut p);
            p
        };

        let xr = along(REFLECT);
        let fr = eval(&xr)?;
        note(&xr, fr, &mut best);
        if fr < fvals[0] {
            let xe = along(REFLECT * EXPAND);
            let fe = eval(&xe)?;
            note(&xe, fe, &mut best);
            if fe < fr {
                simplex[worst] = xe;
                fvals[worst] = fe;
            } else {
                simplex[worst] = xr;
                fvals[worst] = fr;
            }
            continue;
        }
        if fr < fvals[worst - 1] {
            simplex[worst] = xr;
            fvals[worst] = fr;
            continue;
        }
        let (xc, fc, accept) = if fr < fvals[worst] {
            let xc = along(REFLECT * CONTRACT);
            let fc = eval(&xc)?;
            (xc, fc, fc <= fr)
        } else {
            let xc = along(-CONTRACT);
            let fc = eval(&xc)?;
            (xc, fc, fc < fvals[worst])
        };
        note(&xc, fc, &mut best);
        if accept {
            simplex[worst] = xc;
            fvals[worst] = fc;
            continue;
        }
        for i in 1..=q {
            let shrunk: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(b, x)| b + SHRINK * (x - b)).collect();
            fvals[i] = eval(&shrunk)?;
            note(&shrunk, fvals[i], &mut best);
            simplex[i] = shrunk;
        }
    }

    Ok(SearchResult {
        x: map.to_theta(&best.0),
        value: best.1,
        grid_x: map.to_theta(&grid_u),
        grid_value,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absolute_value_kink_is_found() {
        let b = ParameterBox::interval(0.0, 5.0).unwrap();
        let opts = SearchOptions {
            grid_points: 11,
            ..Default::default()
        };
        let r = minimize_on_box(|t| (t[0] - 2.0).abs(), &b, &opts).unwrap();
        assert_eq!(r.grid_x, vec![2.0]);
        assert_eq!(r.x, vec![2.0]);
        assert!(r.converged);
    }

    #[test]
    fn refinement_improves_on_grid() {
        let b = ParameterBox::interval(-3.0, -0.1).unwrap();
        let r = minimize_on_box(|t| (t[0] + 1.234567).abs(), &b, &SearchOptions::default()).unwrap();
        assert!((r.x[0] + 1.234567).abs() < 1e-7);
        assert!(r.value <= r.grid_value);
        assert!(r.converged);
    }

    #[test]
    fn two_dimensional_quadratic() {
        let b = ParameterBox::new(vec![-1.0, -1.0], vec![1.0, 2.0]).unwrap();
        let r = minimize_on_box(
            |t| (t[0] - 0.3).powi(2) + 2.0 * (t[1] - 1.1).powi(2),
            &b,
            &SearchOptions::default(),
        )
        .unwrap();
        assert!((r.x[0] - 0.3).abs() < 1e-6 && (r.x[1] - 1.1).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn boundary_minimum_stays_in_box() {
        let b = ParameterBox::interval(-3.0, -0.1).unwrap();
        let r = minimize_on_box(|t| t[0].abs(), &b, &SearchOptions::default()).unwrap();
        assert_eq!(r.x, vec![-0.1]);
    }

    #[test]
    fn grid_ties_pick_first_index() {
        let b = ParameterBox::interval(0.0, 1.0).unwrap();
        let opts = SearchOptions {
            grid_points: 5,
            max_iter: 0,
            ..Default::default()
        };
        let r = minimize_on_box(|_| 1.0, &b, &opts).unwrap();
        assert_eq!(r.grid_x, vec![0.0]);
        assert!(!r.converged);
    }

    #[test]
    fn nan_is_reported_with_location() {
        let b = ParameterBox::interval(0.0, 1.0).unwrap();
        let r = minimize_on_box(|t| if t[0] > 0.5 { f64::NAN } else { 1.0 }, &b, &SearchOptions::default());
        assert!(matches!(r, Err(OptimError::NonFinite { theta }) if theta[0] > 0.5));
    }
}
