use crate::error::{invalid, IapError, Result};
use crate::numerics::{gaussian_matrix, Matrix, RngStream};
use crate::scalar::Real;

/// Shift added by [`OutputNonlinearity::ShiftedRelu`].
pub const RELU_SHIFT: f64 = 1e-6;

/// Positive output nonlinearity `f` of a learned feature net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum OutputNonlinearity {
    #[default]
    Exp,
    ShiftedRelu,
}

impl OutputNonlinearity {
    fn apply<T: Real>(self, x: T) -> Result<T> {
        match self {
            OutputNonlinearity::Exp => {
                if x > T::lit(super::MAX_EXPONENT).min(T::max_value().ln()) {
                    return Err(IapError::Range(format!(
                        "learned feature exponent {x} overflows"
                    )));
                }
                Ok(x.exp())
            }
            OutputNonlinearity::ShiftedRelu => Ok(x.max(T::zero()) + T::lit(RELU_SHIFT)),
        }
    }
}

/// One-hidden-layer network `x -> f(W2 tanh(W1 x + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedFeatureNet<T> {
    w1: Matrix<T>,
    b1: Vec<T>,
    w2: Matrix<T>,
    b2: Vec<T>,
    output: OutputNonlinearity,
}

impl<T: Real> LearnedFeatureNet<T> {
    pub fn new(
        w1: Matrix<T>,
        b1: Vec<T>,
        w2: Matrix<T>,
        b2: Vec<T>,
        output: OutputNonlinearity,
    ) -> Result<Self> {
        if w1.rows() == 0 || w1.cols() == 0 || w2.rows() == 0 {
            return invalid("learned net dimensions must be positive");
        }
        if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
            return invalid(format!(
                "learned net shapes disagree: W1 {:?}, b1 {}, W2 {:?}, b2 {}",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            ));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            output,
        })
    }

    pub fn zeros(d: usize, hidden: usize, m: usize, output: OutputNonlinearity) -> Result<Self> {
        Self::new(
            Matrix::zeros(hidden, d),
            vec![T::zero(); hidden],
            Matrix::zeros(m, hidden),
            vec![T::zero(); m],
            output,
        )
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn random(
        d: usize,
        hidden: usize,
        m: usize,
        output: OutputNonlinearity,
        stream: &RngStream,
    ) -> Result<Self> {
        let s1 = T::one() / T::from_usize_lossy(d).sqrt();
        let s2 = T::one() / T::from_usize_lossy(hidden).sqrt();
        let w1 = gaussian_matrix::<T>(hidden, d, &stream.substream(0))?.scale(s1);
        let w2 = gaussian_matrix::<T>(m, hidden, &stream.substream(1))?.scale(s2);
        Self::new(w1, vec![T::zero(); hidden], w2, vec![T::zero(); m], output)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn output(&self) -> OutputNonlinearity {
        self.output
    }

    pub fn param_count(&self) -> usize {
        Self::count(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn count(d: usize, hidden: usize, m: usize) -> usize {
        hidden * d + hidden + m * hidden + m
    }

    /// Parameters in the order `W1, b1, W2, b2` (row-major).
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn from_flat(
        d: usize,
        hidden: usize,
        m: usize,
        output: OutputNonlinearity,
        flat: &[T],
    ) -> Result<Self> {
        if flat.len() != Self::count(d, hidden, m) {
            return invalid(format!(
                "learned net needs {} parameters, got {}",
                Self::count(d, hidden, m),
                flat.len()
            ));
        }
        let (w1, rest) = flat.split_at(hidden * d);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(m * hidden);
        Self::new(
            Matrix::from_vec(hidden, d, w1.to_vec())?,
            b1.to_vec(),
            Matrix::from_vec(m, hidden, w2.to_vec())?,
            b2.to_vec(),
            output,
        )
    }

    pub fn forward_vec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim() {
            return invalid(format!(
                "learned net expects width {}, got {}",
                self.input_dim(),
                x.len()
            ));
        }
        let h: Vec<T> = self
            .w1
            .matvec(x)?
            .into_iter()
            .zip(&self.b1)
            .map(|(a, &b)| (a + b).tanh())
            .collect();
        self.w2
            .matvec(&h)?
            .into_iter()
            .zip(&self.b2)
            .map(|(a, &b)| self.output.apply(a + b))
            .collect()
    }
}

/// Query and key networks of a learned kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedFeaturePair<T> {
    pub query: LearnedFeatureNet<T>,
    pub key: LearnedFeatureNet<T>,
}

impl<T: Real> LearnedFeaturePair<T> {
    pub fn random(
        d: usize,
        hidden: usize,
        m: usize,
        output: OutputNonlinearity,
        stream: &RngStream,
    ) -> Result<Self> {
        Ok(Self {
            query: LearnedFeatureNet::random(d, hidden, m, output, &stream.substream(0))?,
            key: LearnedFeatureNet::random(d, hidden, m, output, &stream.substream(1))?,
        })
    }
}

/// Applies `net` to every row of `x`.
pub fn learned_features<T: Real>(x: &Matrix<T>, net: &LearnedFeatureNet<T>) -> Result<Matrix<T>> {
    if x.cols() != net.input_dim() {
        return invalid(format!(
            "learned net expects width {}, got {}",
            net.input_dim(),
            x.cols()
        ));
    }
    let mut data = Vec::with_capacity(x.rows() * net.output_dim());
    for row in x.row_iter() {
        data.extend(net.forward_vec(row)?);
    }
    Matrix::from_vec(x.rows(), net.output_dim(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::MulCounter;

    #[test]
    fn zero_weights_give_ones() {
        let net = LearnedFeatureNet::<f64>::zeros(3, 4, 5, OutputNonlinearity::Exp).unwrap();
        let x = Matrix::from_fn(6, 3, |i, j| (i + j) as f64 - 2.0);
        let f = learned_features(&x, &net).unwrap();
        assert_eq!(f.shape(), (6, 5));
        assert!(f.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn output_signs() {
        let s = RngStream::new(3, 0);
        let pos = LearnedFeatureNet::<f64>::random(4, 8, 6, OutputNonlinearity::Exp, &s).unwrap();
        let relu =
            LearnedFeatureNet::<f64>::random(4, 8, 6, OutputNonlinearity::ShiftedRelu, &s).unwrap();
        let x = crate::numerics::gaussian_matrix::<f64>(200, 4, &RngStream::new(5, 0))
            .unwrap()
            .scale(3.0);
        assert!(learned_features(&x, &pos)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v > 0.0));
        assert!(learned_features(&x, &relu)
            .unwrap()
            .as_slice()
            .iter()
            .all(|&v| v >= RELU_SHIFT));
    }

    #[test]
    fn flat_round_trip() {
        let net = LearnedFeatureNet::<f64>::random(
            3,
            5,
            2,
            OutputNonlinearity::Exp,
            &RngStream::new(1, 2),
        )
        .unwrap();
        let flat = net.to_flat();
        assert_eq!(flat.len(), 5 * 3 + 5 + 2 * 5 + 2);
        assert_eq!(
            LearnedFeatureNet::from_flat(3, 5, 2, OutputNonlinearity::Exp, &flat).unwrap(),
            net
        );
        assert!(
            LearnedFeatureNet::<f64>::from_flat(3, 5, 2, OutputNonlinearity::Exp, &flat[1..])
                .is_err()
        );
    }

    #[test]
    fn width_mismatch() {
        let net = LearnedFeatureNet::<f64>::zeros(3, 4, 5, OutputNonlinearity::Exp).unwrap();
        assert!(learned_features(&Matrix::zeros(2, 4), &net).is_err());
    }

    #[test]
    fn factored_product_matches_explicit() {
        let s = RngStream::new(11, 0);
        let nq =
            LearnedFeatureNet::<f64>::random(4, 8, 6, OutputNonlinearity::Exp, &s.substream(0))
                .unwrap();
        let nk =
            LearnedFeatureNet::<f64>::random(4, 8, 6, OutputNonlinearity::Exp, &s.substream(1))
                .unwrap();
        let x = crate::numerics::gaussian_matrix::<f64>(32, 4, &s.substream(2)).unwrap();
        let v = crate::numerics::gaussian_matrix::<f64>(32, 3, &s.substream(3)).unwrap();
        let (fq, fk) = (
            learned_features(&x, &nq).unwrap(),
            learned_features(&x, &nk).unwrap(),
        );
        let factored = fq.matmul(&fk.t_matmul(&v).unwrap()).unwrap();
        let explicit = fq.matmul_t(&fk).unwrap().matmul(&v).unwrap();
        let rel = factored.max_abs_diff(&explicit) / explicit.max_abs();
        assert!(rel <= 1e-10, "rel err {rel}");
    }

    #[test]
    fn factored_cost_linear_in_length() {
        let (m, d_v) = (6usize, 3usize);
        let cost = |l: usize| {
            let fq = Matrix::<f64>::filled(l, m, 1.0);
            let v = Matrix::<f64>::filled(l, d_v, 1.0);
            let mut c = MulCounter::new();
            let kv = c.t_matmul(&fq, &v).unwrap();
            c.matmul(&fq, &kv).unwrap();
            c.muls
        };
        assert_eq!(cost(64), 2 * cost(32));
        assert_eq!(cost(32) as usize, 2 * 32 * m * d_v);
    }
}
