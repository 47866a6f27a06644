//! Explicit convex models of subdifferentials and min-norm queries.

use crate::vecops::{dot, norm, solve_dense};

/// Explicit representation of a (superset of a) Clarke subdifferential at a
/// point.
///
/// * `BoxAffine` is the set `{ base + sum t_i * gen_i : t_i in [lo_i, hi_i] }`,
///   the natural form for sums of weighted `abs` kinks.
/// * `Hull` is the convex hull of finitely many vertices, the natural form
///   when `max`/`min` branches tie.
///
/// With no generators / a single vertex the model degenerates to one gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum SubgradientModel {
    BoxAffine {
        base: Vec<f64>,
        generators: Vec<Generator>,
    },
    Hull {
        vertices: Vec<Vec<f64>>,
    },
}

/// One box generator: the direction and its coefficient interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub vector: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl Generator {
    pub fn symmetric(vector: Vec<f64>) -> Self {
        Generator { vector, lo: -1.0, hi: 1.0 }
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ModelError {
    #[error("unsupported kink structure: {what}")]
    UnsupportedStructure { what: String },
    #[error("min-norm solve did not converge: best {best}, gap bound {gap}")]
    NonConvergence { best: f64, gap: f64 },
}

impl SubgradientModel {
    /// Model consisting of one gradient vector.
    pub fn gradient(g: Vec<f64>) -> Self {
        SubgradientModel::BoxAffine { base: g, generators: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        match self {
            SubgradientModel::BoxAffine { base, .. } => base.len(),
            SubgradientModel::Hull { vertices } => vertices[0].len(),
        }
    }

    /// The single gradient this model degenerates to, if it does.
    pub fn as_gradient(&self) -> Option<&[f64]> {
        match self {
            SubgradientModel::BoxAffine { base, generators } if generators.is_empty() => {
                Some(base)
            }
            SubgradientModel::Hull { vertices } if vertices.len() == 1 => Some(&vertices[0]),
            _ => None,
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        match self {
            SubgradientModel::BoxAffine { base, generators } => SubgradientModel::BoxAffine {
                base: base.iter().map(|v| c * v).collect(),
                generators: generators
                    .iter()
                    .map(|g| Generator {
                        vector: g.vector.iter().map(|v| c * v).collect(),
                        lo: g.lo,
                        hi: g.hi,
                    })
                    .collect(),
            },
            SubgradientModel::Hull { vertices } => SubgradientModel::Hull {
                vertices: vertices
                    .iter()
                    .map(|v| v.iter().map(|w| c * w).collect())
                    .collect(),
            },
        }
    }

    pub fn translate(&self, by: &[f64]) -> Self {
        let shift = |v: &Vec<f64>| -> Vec<f64> { v.iter().zip(by).map(|(a, b)| a + b).collect() };
        match self {
            SubgradientModel::BoxAffine { base, generators } => SubgradientModel::BoxAffine {
                base: shift(base),
                generators: generators.clone(),
            },
            SubgradientModel::Hull { vertices } => SubgradientModel::Hull {
                vertices: vertices.iter().map(shift).collect(),
            },
        }
    }

    /// Enumerates the extreme points of the model. Errors when a box has too
    /// many generators for corner enumeration.
    pub fn vertices(&self) -> Result<Vec<Vec<f64>>, ModelError> {
        match self {
            SubgradientModel::Hull { vertices } => Ok(vertices.clone()),
            SubgradientModel::BoxAffine { base, generators } => {
                let m = generators.len();
                if m > 16 {
                    return Err(ModelError::UnsupportedStructure {
                        what: format!("box with {m} generators cannot be enumerated"),
                    });
                }
                let mut out = Vec::with_capacity(1 << m);
                for mask in 0..(1usize << m) {
                    let mut v = base.clone();
                    for (j, g) in generators.iter().enumerate() {
                        let t = if mask & (1 << j) != 0 { g.hi } else { g.lo };
                        crate::vecops::axpy(t, &g.vector, &mut v);
                    }
                    out.push(v);
                }
                dedupe(&mut out);
                Ok(out)
            }
        }
    }

    /// Minkowski sum. Box plus box stays a box; anything involving a hull
    /// becomes the hull of pairwise vertex sums.
    pub fn minkowski_sum(&self, other: &Self) -> Result<Self, ModelError> {
        match (self, other) {
            (
                SubgradientModel::BoxAffine { base: b1, generators: g1 },
                SubgradientModel::BoxAffine { base: b2, generators: g2 },
            ) => {
                let base = b1.iter().zip(b2).map(|(a, b)| a + b).collect();
                let mut generators = g1.clone();
                generators.extend(g2.iter().cloned());
                Ok(SubgradientModel::BoxAffine { base, generators })
            }
            _ => {
                let va = self.vertices()?;
                let vb = other.vertices()?;
                let mut vertices = Vec::with_capacity(va.len() * vb.len());
                for a in &va {
                    for b in &vb {
                        vertices.push(a.iter().zip(b).map(|(x, y)| x + y).collect());
                    }
                }
                dedupe(&mut vertices);
                Ok(SubgradientModel::Hull { vertices })
            }
        }
    }

    /// Whether `v` belongs to the model, up to Euclidean distance `tol`
    /// (checked by solving the feasibility least-squares problem).
    pub fn contains(&self, v: &[f64], tol: f64) -> Result<bool, ModelError> {
        let neg: Vec<f64> = v.iter().map(|w| -w).collect();
        let d = min_norm_distance(&self.translate(&neg))?;
        Ok(d <= tol)
    }
}

fn dedupe(points: &mut Vec<Vec<f64>>) {
    let mut seen: Vec<Vec<u64>> = Vec::new();
    points.retain(|p| {
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        if seen.contains(&key) {
            false
        } else {
            seen.push(key);
            true
        }
    });
}

/// `min { ||g|| : g in model }`.
pub fn min_norm_distance(model: &SubgradientModel) -> Result<f64, ModelError> {
    min_norm_point(model).map(|(_, d)| d)
}

/// The min-norm element of the model and its norm. Boxes are solved by
/// projected gradient with step `1 / L`, hulls by Wolfe's min-norm-point
/// algorithm.
pub fn min_norm_point(model: &SubgradientModel) -> Result<(Vec<f64>, f64), ModelError> {
    match model {
        SubgradientModel::BoxAffine { base, generators } => box_min_norm(base, generators),
        SubgradientModel::Hull { vertices } => wolfe_min_norm(vertices),
    }
}

const BOX_MAX_ITERS: usize = 10_000;

fn box_min_norm(base: &[f64], gens: &[Generator]) -> Result<(Vec<f64>, f64), ModelError> {
    let m = gens.len();
    if m == 0 {
        return Ok((base.to_vec(), norm(base)));
    }
    // Gram matrix and a safe (Gershgorin) upper bound on its largest eigenvalue.
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            gram[i * m + j] = dot(&gens[i].vector, &gens[j].vector);
        }
    }
    let lam_max = (0..m)
        .map(|i| (0..m).map(|j| gram[i * m + j].abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    if lam_max == 0.0 {
        // all generators vanish
        return Ok((base.to_vec(), norm(base)));
    }
    let step = 1.0 / (2.0 * lam_max);

    let mut t = vec![0.0; m];
    let residual = |t: &[f64]| -> Vec<f64> {
        let mut r = base.to_vec();
        for (j, g) in gens.iter().enumerate() {
            crate::vecops::axpy(t[j], &g.vector, &mut r);
        }
        r
    };
    let mut r = residual(&t);
    let mut best_gap = f64::INFINITY;
    for _ in 0..BOX_MAX_ITERS {
        let grad: Vec<f64> = (0..m).map(|j| 2.0 * dot(&gens[j].vector, &r)).collect();
        // Convexity gap bound: q(t) - q* <= <grad, t - s> with s the box
        // minimizer of the linearized objective.
        let mut gap = 0.0;
        for j in 0..m {
            let s = if grad[j] > 0.0 { gens[j].lo } else { gens[j].hi };
            gap += grad[j] * (t[j] - s);
        }
        best_gap = best_gap.min(gap.max(0.0));
        let q = dot(&r, &r);
        if gap <= 1e-18 * (1.0 + q) {
            return Ok((r.clone(), q.sqrt()));
        }
        let t_new: Vec<f64> = (0..m)
            .map(|j| (t[j] - step * grad[j]).clamp(gens[j].lo, gens[j].hi))
            .collect();
        if t_new == t {
            return Ok((r.clone(), q.sqrt()));
        }
        t = t_new;
        r = residual(&t);
    }
    let q = dot(&r, &r);
    Err(ModelError::NonConvergence { best: q.sqrt(), gap: best_gap.max(0.0).sqrt() })
}

const WOLFE_MAX_MAJOR: usize = 1_000;

/// Wolfe's min-norm-point algorithm over the convex hull of `points`.
pub(crate) fn wolfe_min_norm(points: &[Vec<f64>]) -> Result<(Vec<f64>, f64), ModelError> {
    assert!(!points.is_empty(), "hull model needs at least one vertex");
    let pmax2 = points.iter().map(|p| dot(p, p)).fold(0.0_f64, f64::max);
    let tol = 1e-12 * (1.0 + pmax2);

    // Start from the min-norm vertex.
    let start = (0..points.len())
        .min_by(|&a, &b| {
            dot(&points[a], &points[a])
                .partial_cmp(&dot(&points[b], &points[b]))
                .unwrap()
        })
        .unwrap();
    let mut corral = vec![start];
    let mut lambda = vec![1.0];
    let mut w = points[start].clone();

    for _ in 0..WOLFE_MAX_MAJOR {
        let w2 = dot(&w, &w);
        let (jmin, dmin) = (0..points.len())
            .map(|j| (j, dot(&w, &points[j])))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        if dmin >= w2 - tol || corral.contains(&jmin) {
            return Ok((w, w2.sqrt()));
        }
        corral.push(jmin);
        lambda.push(0.0);

        // Minor cycle: move to the min-norm point of the affine hull of the
        // corral, trimming vertices whose barycentric weight would go negative.
        loop {
            let k = corral.len();
            let n1 = k + 1;
            let mut a = vec![0.0; n1 * n1];
            let mut b = vec![0.0; n1];
            for i in 0..k {
                for j in 0..k {
                    a[i * n1 + j] = dot(&points[corral[i]], &points[corral[j]]);
                }
                a[i * n1 + k] = 1.0;
                a[k * n1 + i] = 1.0;
            }
            b[k] = 1.0;
            let mu = match solve_dense(&a, &b, n1) {
                Some(sol) => sol[..k].to_vec(),
                None => {
                    // Affinely dependent corral: drop the newest vertex.
                    corral.pop();
                    lambda.pop();
                    break;
                }
            };
            if mu.iter().all(|&m| m > 1e-12) {
                lambda = mu;
                break;
            }
            let mut theta = 1.0_f64;
            for i in 0..k {
                if mu[i] <= 1e-12 && lambda[i] - mu[i] > 0.0 {
                    theta = theta.min(lambda[i] / (lambda[i] - mu[i]));
                }
            }
            for i in 0..k {
                lambda[i] = (1.0 - theta) * lambda[i] + theta * mu[i];
            }
            let mut i = 0;
            while i < corral.len() {
                if lambda[i] <= 1e-12 {
                    corral.remove(i);
                    lambda.remove(i);
                } else {
                    i += 1;
                }
            }
            if corral.is_empty() {
                // Numerical corner case: restart from the best vertex.
                corral.push(start);
                lambda.push(1.0);
                break;
            }
            let total: f64 = lambda.iter().sum();
            for l in lambda.iter_mut() {
                *l /= total;
            }
            if corral.len() == 1 {
                break;
            }
        }
        w = vec![0.0; points[0].len()];
        for (i, &idx) in corral.iter().enumerate() {
            crate::vecops::axpy(lambda[i], &points[idx], &mut w);
        }
    }
    let w2 = dot(&w, &w);
    let dmin = (0..points.len())
        .map(|j| dot(&w, &points[j]))
        .fold(f64::INFINITY, f64::min);
    Err(ModelError::NonConvergence { best: w2.sqrt(), gap: (w2 - dmin).max(0.0).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_distance_is_its_norm() {
        let m = SubgradientModel::gradient(vec![3.0, 4.0]);
        assert_eq!(min_norm_distance(&m).unwrap(), 5.0);
    }

    #[test]
    fn interval_containing_zero_has_distance_zero() {
        let m = SubgradientModel::Hull { vertices: vec![vec![0.0], vec![1.0]] };
        assert_eq!(min_norm_distance(&m).unwrap(), 0.0);
    }

    #[test]
    fn offset_interval_distance_is_nearest_endpoint() {
        let m = SubgradientModel::Hull { vertices: vec![vec![2.0], vec![5.0]] };
        assert!((min_norm_distance(&m).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn segment_distance_in_plane() {
        // Segment from (1,0) to (0,1): nearest point to the origin is (0.5,0.5).
        let m = SubgradientModel::Hull { vertices: vec![vec![1.0, 0.0], vec![0.0, 1.0]] };
        let (p, d) = min_norm_point(&m).unwrap();
        assert!((d - (0.5_f64).sqrt()).abs() < 1e-10);
        assert!((p[0] - 0.5).abs() < 1e-10 && (p[1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn triangle_containing_origin() {
        let m = SubgradientModel::Hull {
            vertices: vec![vec![1.0, 0.0], vec![-1.0, 1.0], vec![-1.0, -1.0]],
        };
        assert!(min_norm_distance(&m).unwrap() < 1e-10);
    }

    #[test]
    fn box_with_zero_inside() {
        let m = SubgradientModel::BoxAffine {
            base: vec![2.0, 2.0],
            generators: vec![
                Generator::symmetric(vec![2.0, 0.0]),
                Generator::symmetric(vec![0.0, 2.0]),
            ],
        };
        assert!(min_norm_distance(&m).unwrap() < 1e-12);
    }

    #[test]
    fn box_clipped_away_from_zero() {
        // base (3,0) with generator e1*[-1,1]: nearest point (2,0).
        let m = SubgradientModel::BoxAffine {
            base: vec![3.0, 0.0],
            generators: vec![Generator::symmetric(vec![1.0, 0.0])],
        };
        assert!((min_norm_distance(&m).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn minkowski_of_hulls_matches_interval_arithmetic() {
        let a = SubgradientModel::Hull { vertices: vec![vec![0.0], vec![1.0]] };
        let b = SubgradientModel::Hull { vertices: vec![vec![0.0], vec![1.0]] };
        let c = SubgradientModel::gradient(vec![0.0]);
        let sum = a.minkowski_sum(&b).unwrap().minkowski_sum(&c).unwrap().scale(1.0 / 3.0);
        // (1/3) * ([0,1] + [0,1] + {0}) = [0, 2/3]
        assert_eq!(min_norm_distance(&sum).unwrap(), 0.0);
        let verts = sum.vertices().unwrap();
        let max = verts.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
        assert!((max - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn contains_uses_feasibility_distance() {
        let m = SubgradientModel::BoxAffine {
            base: vec![0.0, 0.0],
            generators: vec![
                Generator::symmetric(vec![1.0, 0.0]),
                Generator::symmetric(vec![0.0, 1.0]),
            ],
        };
        assert!(m.contains(&[0.5, -0.5], 1e-8).unwrap());
        assert!(!m.contains(&[1.5, 0.0], 1e-8).unwrap());
    }
}
