//! Pointwise coefficient matrices acting on one time slice of a signal.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type C64 = Complex64;
pub type Mat = DMatrix<C64>;

pub const ONE: C64 = C64::new(1.0, 0.0);
pub const ZERO: C64 = C64::new(0.0, 0.0);

/// A linear map on one time slice.
///
/// `Scalar` is `c·I` on any space. `Cells` is block diagonal with one `m×m`
/// block per spatial cell; a single block is broadcast to every cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Coef {
    Scalar(C64),
    Dense(Mat),
    Cells { m: usize, cells: usize, blocks: Vec<Mat> },
}

impl Coef {
    pub fn identity() -> Self {
        Coef::Scalar(ONE)
    }

    pub fn zero() -> Self {
        Coef::Scalar(ZERO)
    }

    pub fn real(x: f64) -> Self {
        Coef::Scalar(C64::new(x, 0.0))
    }

    /// Per-cell scalars broadcast over `m` components.
    pub fn cell_scalars(values: &[C64], m: usize) -> Self {
        let blocks = values
            .iter()
            .map(|&v| Mat::from_diagonal_element(m, m, v))
            .collect();
        Coef::Cells { m, cells: values.len(), blocks }
    }

    pub fn diag(values: &[C64]) -> Self {
        Coef::Dense(Mat::from_diagonal(&nalgebra::DVector::from_column_slice(values)))
    }

    /// `(rows, cols)`, or `None` for a dimension-free scalar.
    pub fn shape(&self) -> Option<(usize, usize)> {
        match self {
            Coef::Scalar(_) => None,
            Coef::Dense(a) => Some((a.nrows(), a.ncols())),
            Coef::Cells { m, cells, .. } => Some((m * cells, m * cells)),
        }
    }

    pub fn fits(&self, rows: usize, cols: usize) -> bool {
        match self.shape() {
            None => rows == cols,
            Some(s) => s == (rows, cols),
        }
    }

    pub fn as_scalar(&self) -> Option<C64> {
        match self {
            Coef::Scalar(c) => Some(*c),
            Coef::Dense(a) if a.nrows() == 1 && a.ncols() == 1 => Some(a[(0, 0)]),
            _ => None,
        }
    }

    /// `y = A x`.
    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        match self {
            Coef::Scalar(c) => {
                for (yi, xi) in y.iter_mut().zip(x) {
                    *yi = c * xi;
                }
            }
            Coef::Dense(a) => {
                let (r, c) = (a.nrows(), a.ncols());
                for (i, yi) in y.iter_mut().enumerate().take(r) {
                    let mut s = ZERO;
                    for j in 0..c {
                        s += a[(i, j)] * x[j];
                    }
                    *yi = s;
                }
            }
            Coef::Cells { m, blocks, .. } => {
                let m = *m;
                for (cell, (xs, ys)) in x.chunks(m).zip(y.chunks_mut(m)).enumerate() {
                    let b = if blocks.len() == 1 { &blocks[0] } else { &blocks[cell] };
                    if m == 1 {
                        ys[0] = b[(0, 0)] * xs[0];
                        continue;
                    }
                    for i in 0..m {
                        let mut s = ZERO;
                        for j in 0..m {
                            s += b[(i, j)] * xs[j];
                        }
                        ys[i] = s;
                    }
                }
            }
        }
    }

    pub fn adjoint(&self) -> Self {
        match self {
            Coef::Scalar(c) => Coef::Scalar(c.conj()),
            Coef::Dense(a) => Coef::Dense(a.adjoint()),
            Coef::Cells { m, cells, blocks } => Coef::Cells {
                m: *m,
                cells: *cells,
                blocks: blocks.iter().map(|b| b.adjoint()).collect(),
            },
        }
    }

    pub fn scale(&self, s: C64) -> Self {
        match self {
            Coef::Scalar(c) => Coef::Scalar(c * s),
            Coef::Dense(a) => Coef::Dense(a * s),
            Coef::Cells { m, cells, blocks } => Coef::Cells {
                m: *m,
                cells: *cells,
                blocks: blocks.iter().map(|b| b * s).collect(),
            },
        }
    }

    pub fn to_dense(&self, dim: usize) -> Mat {
        match self {
            Coef::Scalar(c) => Mat::from_diagonal_element(dim, dim, *c),
            Coef::Dense(a) => a.clone(),
            Coef::Cells { m, cells, blocks } => {
                let n = m * cells;
                let mut out = Mat::zeros(n, n);
                for cell in 0..*cells {
                    let b = if blocks.len() == 1 { &blocks[0] } else { &blocks[cell] };
                    out.view_mut((cell * m, cell * m), (*m, *m)).copy_from(b);
                }
                out
            }
        }
    }

    fn cellwise(
        &self,
        other: &Coef,
        f: impl Fn(&Mat, &Mat) -> Mat,
    ) -> Option<Coef> {
        match (self, other) {
            (
                Coef::Cells { m: m1, cells: c1, blocks: b1 },
                Coef::Cells { m: m2, cells: c2, blocks: b2 },
            ) if m1 == m2 && c1 == c2 => {
                let len = b1.len().max(b2.len());
                let blocks = (0..len)
                    .map(|i| {
                        let x = if b1.len() == 1 { &b1[0] } else { &b1[i] };
                        let y = if b2.len() == 1 { &b2[0] } else { &b2[i] };
                        f(x, y)
                    })
                    .collect();
                Some(Coef::Cells { m: *m1, cells: *c1, blocks })
            }
            _ => None,
        }
    }

    pub fn add(&self, other: &Coef) -> Self {
        match (self, other) {
            (Coef::Scalar(a), Coef::Scalar(b)) => Coef::Scalar(a + b),
            (Coef::Scalar(a), x) | (x, Coef::Scalar(a)) => x.shift(*a),
            (Coef::Dense(a), Coef::Dense(b)) => Coef::Dense(a + b),
            _ => {
                if let Some(c) = self.cellwise(other, |x, y| x + y) {
                    return c;
                }
                let n = self.shape().or(other.shape()).map(|s| s.0).unwrap_or(1);
                Coef::Dense(self.to_dense(n) + other.to_dense(n))
            }
        }
    }

    pub fn sub(&self, other: &Coef) -> Self {
        self.add(&other.scale(-ONE))
    }

    /// `A + c·I`.
    pub fn shift(&self, c: C64) -> Self {
        match self {
            Coef::Scalar(a) => Coef::Scalar(a + c),
            Coef::Dense(a) => {
                let mut a = a.clone();
                for i in 0..a.nrows().min(a.ncols()) {
                    a[(i, i)] += c;
                }
                Coef::Dense(a)
            }
            Coef::Cells { m, cells, blocks } => Coef::Cells {
                m: *m,
                cells: *cells,
                blocks: blocks
                    .iter()
                    .map(|b| b + Mat::from_diagonal_element(*m, *m, c))
                    .collect(),
            },
        }
    }

    /// Matrix product `self · other`.
    pub fn mul(&self, other: &Coef) -> Self {
        match (self, other) {
            (Coef::Scalar(a), x) => x.scale(*a),
            (x, Coef::Scalar(b)) => x.scale(*b),
            (Coef::Dense(a), Coef::Dense(b)) => Coef::Dense(a * b),
            _ => {
                if let Some(c) = self.cellwise(other, |x, y| x * y) {
                    return c;
                }
                let (r, _) = self.shape().unwrap_or((1, 1));
                let (_, c) = other.shape().unwrap_or((1, 1));
                let a = self.to_dense(r);
                let b = other.to_dense(c);
                Coef::Dense(a * b)
            }
        }
    }

    pub fn inverse(&self) -> Option<Self> {
        match self {
            Coef::Scalar(c) => (c.norm() > 0.0).then(|| Coef::Scalar(ONE / c)),
            Coef::Dense(a) => invert(a).map(Coef::Dense),
            Coef::Cells { m, cells, blocks } => {
                let inv: Option<Vec<Mat>> = blocks.iter().map(invert).collect();
                inv.map(|blocks| Coef::Cells { m: *m, cells: *cells, blocks })
            }
        }
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn herm_min_eig(&self) -> f64 {
        match self {
            Coef::Scalar(c) => c.re,
            Coef::Dense(a) => herm_min_eig(a),
            Coef::Cells { blocks, .. } => blocks
                .iter()
                .map(herm_min_eig)
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Spectral norm.
    pub fn norm2(&self) -> f64 {
        match self {
            Coef::Scalar(c) => c.norm(),
            Coef::Dense(a) => spectral_norm(a),
            Coef::Cells { blocks, .. } => blocks.iter().map(spectral_norm).fold(0.0, f64::max),
        }
    }

    pub fn max_abs(&self) -> f64 {
        match self {
            Coef::Scalar(c) => c.norm(),
            Coef::Dense(a) => a.iter().map(|z| z.norm()).fold(0.0, f64::max),
            Coef::Cells { blocks, .. } => blocks
                .iter()
                .flat_map(|b| b.iter())
                .map(|z| z.norm())
                .fold(0.0, f64::max),
        }
    }
}

pub fn invert(a: &Mat) -> Option<Mat> {
    if a.nrows() != a.ncols() {
        return None;
    }
    if a.nrows() == 1 {
        let v = a[(0, 0)];
        return (v.norm() > 0.0).then(|| Mat::from_element(1, 1, ONE / v));
    }
    let inv = a.clone().lu().try_inverse()?;
    inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()).then_some(inv)
}

pub fn herm_part(a: &Mat) -> Mat {
    (a + a.adjoint()) * C64::new(0.5, 0.0)
}

pub fn herm_min_eig(a: &Mat) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)].re;
    }
    herm_part(a)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn spectral_norm(a: &Mat) -> f64 {
    if a.nrows() == 1 && a.ncols() == 1 {
        return a[(0, 0)].norm();
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}
