//! Frozen linear prior head: a per-view latent token is projected to
//! per-joint 6D rotations and shape coefficients.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::body::{PoseParams, ShapeParams, NUM_BETAS, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::rotation::{rotmat_to_6d, sixd_to_rotmat, RotMat, Rot6D};

/// Length of the decoded parameter vector: 24 6D blocks followed by 10 betas.
pub const PARAM_DIM: usize = NUM_JOINTS * 6 + NUM_BETAS;
/// Offset of the betas inside the decoded vector.
pub const BETA_OFFSET: usize = NUM_JOINTS * 6;
pub const DEFAULT_TOKEN_DIM: usize = 128;
const HEAD_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct Token(pub Vec<f64>);

/// `y = W·z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorHead {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct TokenFit {
    pub token: Token,
    /// `target − decode_vector(token)`.
    pub residual: Vec<f64>,
    pub residual_norm: f64,
    pub rank: usize,
    pub full_row_rank: bool,
}

/// Identity rotations in 6D for every joint, zero betas.
pub fn rest_vector() -> Vec<f64> {
    let mut y = vec![0.0; PARAM_DIM];
    for k in 0..NUM_JOINTS {
        y[6 * k] = 1.0;
        y[6 * k + 4] = 1.0;
    }
    y
}

/// Packs a pose and shape as `[6D(root), 6D(joint 1), ..., β]`.
pub fn encode_params(pose: &PoseParams, shape: &ShapeParams) -> Result<Vec<f64>> {
    if pose.n_joints() != NUM_JOINTS {
        return Err(Error::DimensionMismatch {
            what: "pose joints",
            expected: NUM_JOINTS,
            got: pose.n_joints(),
        });
    }
    if shape.beta.len() != NUM_BETAS {
        return Err(Error::DimensionMismatch {
            what: "betas",
            expected: NUM_BETAS,
            got: shape.beta.len(),
        });
    }
    let mut y = Vec::with_capacity(PARAM_DIM);
    for k in 0..NUM_JOINTS {
        y.extend_from_slice(&rotmat_to_6d(pose.joint(k)).to_array());
    }
    y.extend_from_slice(&shape.beta);
    Ok(y)
}

/// Parses a raw decoded vector, orthonormalizing each 6D block.
pub fn decode_params(y: &[f64]) -> Result<(PoseParams, ShapeParams)> {
    if y.len() != PARAM_DIM {
        return Err(Error::DimensionMismatch {
            what: "decoded vector",
            expected: PARAM_DIM,
            got: y.len(),
        });
    }
    let mut rots = Vec::with_capacity(NUM_JOINTS);
    for k in 0..NUM_JOINTS {
        let r = sixd_to_rotmat(&Rot6D::from_slice(&y[6 * k..6 * k + 6])).map_err(|e| match e {
            Error::Degenerate6d(reason) => Error::DegenerateJoint { joint: k, reason },
            other => other,
        })?;
        rots.push(r);
    }
    let root = rots.remove(0);
    Ok((
        PoseParams { root, body: rots },
        ShapeParams {
            beta: y[BETA_OFFSET..].to_vec(),
        },
    ))
}

impl PriorHead {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != PARAM_DIM || bias.len() != PARAM_DIM {
            return Err(Error::DimensionMismatch {
                what: "head output",
                expected: PARAM_DIM,
                got: weight.nrows().min(bias.len()),
            });
        }
        if weight.ncols() == 0 {
            return Err(Error::invalid("token dimension must be at least 1"));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior head"));
        }
        Ok(PriorHead { weight, bias })
    }

    pub fn token_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    fn check_token(&self, z: &Token) -> Result<()> {
        if z.0.len() != self.token_dim() {
            return Err(Error::DimensionMismatch {
                what: "token",
                expected: self.token_dim(),
                got: z.0.len(),
            });
        }
        Ok(())
    }

    /// The raw vector `W·z + b`, before Gram-Schmidt.
    pub fn decode_vector(&self, z: &Token) -> Result<Vec<f64>> {
        self.check_token(z)?;
        let y = &self.weight * DVector::from_column_slice(&z.0) + &self.bias;
        Ok(y.as_slice().to_vec())
    }

    pub fn decode(&self, z: &Token) -> Result<(PoseParams, ShapeParams)> {
        decode_params(&self.decode_vector(z)?)
    }

    /// `Wᵀ · g`: pulls a gradient on the decoded vector back to the token.
    pub fn pullback(&self, grad_y: &[f64]) -> Vec<f64> {
        let g = self.weight.tr_mul(&DVector::from_column_slice(grad_y));
        g.as_slice().to_vec()
    }

    /// Least-squares token for a target body (minimum-norm pseudo-inverse).
    pub fn fit_token(&self, pose: &PoseParams, shape: &ShapeParams) -> Result<TokenFit> {
        let target = encode_params(pose, shape)?;
        Ok(self.fit_vector(&target))
    }

    /// Least-squares token for a raw target vector.
    pub fn fit_vector(&self, target: &[f64]) -> TokenFit {
        let rhs = DVector::from_column_slice(target) - &self.bias;
        let svd = self.weight.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = smax * (PARAM_DIM.max(self.token_dim()) as f64) * f64::EPSILON;
        let rank = svd.rank(tol);
        let z = svd.solve(&rhs, tol).expect("U and Vᵀ were computed");
        let token = Token(z.as_slice().to_vec());
        let fitted = &self.weight * &z + &self.bias;
        let residual: Vec<f64> = target.iter().zip(fitted.iter()).map(|(t, f)| t - f).collect();
        let residual_norm = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
        TokenFit {
            token,
            residual,
            residual_norm,
            rank,
            full_row_rank: rank == PARAM_DIM,
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> DMatrix<f64> {
    // Filled row by row so the draw order is explicit.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let n: f64 = StandardNormal.sample(rng);
            m[(r, c)] = sigma * n;
        }
    }
    m
}

/// Deterministic synthetic head. `decode(head, 0)` is the rest pose with zero
/// betas. For `dim > 6` the first six token coordinates drive only the root
/// block (through a scaled orthogonal matrix), so any global orientation is
/// reachable regardless of the body part of the token.
pub fn synth_head(seed: u64, dim: usize) -> Result<PriorHead> {
    if dim == 0 {
        return Err(Error::invalid("token dimension must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = if dim > 6 {
        let mut w = DMatrix::zeros(PARAM_DIM, dim);
        let q = gaussian_matrix(&mut rng, 6, 6, 1.0).qr().q();
        let root_scale = HEAD_SIGMA * (dim as f64).sqrt();
        w.view_mut((0, 0), (6, 6)).copy_from(&(q * root_scale));
        let coupling = gaussian_matrix(&mut rng, 6, dim - 6, HEAD_SIGMA);
        w.view_mut((0, 6), (6, dim - 6)).copy_from(&coupling);
        let body = gaussian_matrix(&mut rng, PARAM_DIM - 6, dim - 6, HEAD_SIGMA);
        w.view_mut((6, 6), (PARAM_DIM - 6, dim - 6)).copy_from(&body);
        w
    } else {
        gaussian_matrix(&mut rng, PARAM_DIM, dim, HEAD_SIGMA)
    };
    PriorHead::new(weight, DVector::from_vec(rest_vector()))
}

/// Normalized 6D vector of a rotation, as `[a; b]`.
pub(crate) fn sixd_of(r: &RotMat) -> [f64; 6] {
    rotmat_to_6d(r).to_array()
}

/// Adds a gradient on the normalized 6D columns into a matrix gradient.
pub(crate) fn add_sixd_grad(g: &[f64], d_r: &mut Matrix3<f64>) {
    for i in 0..3 {
        d_r[(i, 0)] += g[i];
        d_r[(i, 1)] += g[3 + i];
    }
}
