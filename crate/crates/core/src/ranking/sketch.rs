use super::KeyDatabase;
use crate::error::{invalid, Result};
use crate::numerics::{dot, gaussian_matrix, Matrix, RngStream};
use crate::scalar::Real;

/// Sign bits of a hashed vector, 64 per word; bit set means `+`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PackedSigns {
    bits: usize,
    words: Vec<u64>,
}

impl PackedSigns {
    pub fn from_signs(signs: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut bits = 0;
        for s in signs {
            if bits % 64 == 0 {
                words.push(0);
            }
            if s {
                *words.last_mut().expect("pushed") |= 1 << (bits % 64);
            }
            bits += 1;
        }
        Self { bits, words }
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn hamming(&self, other: &Self) -> u32 {
        hamming(&self.words, &other.words)
    }

    /// `psi_1 · psi_2 = (m' - 2 hamming) / m'`.
    pub fn dot(&self, other: &Self) -> f64 {
        score(self.bits, self.hamming(other))
    }

    /// The `±1/sqrt(m')` vector these bits encode.
    pub fn unpack<T: Real>(&self) -> Vec<T> {
        let s = T::one() / T::from_usize_lossy(self.bits).sqrt();
        (0..self.bits)
            .map(|i| {
                if self.words[i / 64] >> (i % 64) & 1 == 1 {
                    s
                } else {
                    -s
                }
            })
            .collect()
    }
}

fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn score(bits: usize, ham: u32) -> f64 {
    (bits as f64 - 2.0 * f64::from(ham)) / bits as f64
}

fn signs<'a, T: Real>(g: &'a Matrix<T>, z: &'a [T]) -> impl Iterator<Item = bool> + 'a {
    g.row_iter().map(move |row| dot(row, z) >= T::zero())
}

/// `sign(G z) / sqrt(m')` with `sign(0) = +1`.
pub fn sign_hash<T: Real>(z: &[T], g: &Matrix<T>) -> Result<Vec<T>> {
    if z.len() != g.cols() {
        return invalid(format!(
            "hash input width {} does not match {}",
            z.len(),
            g.cols()
        ));
    }
    let s = T::one() / T::from_usize_lossy(g.rows()).sqrt();
    Ok(signs(g, z).map(|b| if b { s } else { -s }).collect())
}

/// Gaussian projection `G` (`m' x width`) and the packed hashes of every key.
#[derive(Clone, Debug, PartialEq)]
pub struct SignHashSketch<T> {
    g: Matrix<T>,
    words_per_key: usize,
    keys: Vec<u64>,
    len: usize,
}

impl<T: Real> SignHashSketch<T> {
    pub fn build(keys: &Matrix<T>, m_prime: usize, stream: &RngStream) -> Result<Self> {
        if m_prime == 0 {
            return invalid("sketch width must be >= 1");
        }
        let g = gaussian_matrix(m_prime, keys.cols(), stream)?;
        Self::with_projection(g, keys)
    }

    pub fn with_projection(g: Matrix<T>, keys: &Matrix<T>) -> Result<Self> {
        if g.cols() != keys.cols() {
            return invalid(format!(
                "projection width {} does not match keys {}",
                g.cols(),
                keys.cols()
            ));
        }
        let words_per_key = g.rows().div_ceil(64);
        let mut packed = Vec::with_capacity(words_per_key * keys.rows());
        for k in keys.row_iter() {
            packed.extend(PackedSigns::from_signs(signs(&g, k)).words);
        }
        Ok(Self {
            g,
            words_per_key,
            keys: packed,
            len: keys.rows(),
        })
    }

    /// Same projection applied to a new key snapshot.
    pub fn rehash(&self, keys: &Matrix<T>) -> Result<Self> {
        Self::with_projection(self.g.clone(), keys)
    }

    pub fn width(&self) -> usize {
        self.g.rows()
    }

    pub fn projection(&self) -> &Matrix<T> {
        &self.g
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn hash(&self, z: &[T]) -> Result<PackedSigns> {
        if z.len() != self.g.cols() {
            return invalid(format!(
                "hash input width {} does not match {}",
                z.len(),
                self.g.cols()
            ));
        }
        Ok(PackedSigns::from_signs(signs(&self.g, z)))
    }

    pub fn key(&self, i: usize) -> PackedSigns {
        PackedSigns {
            bits: self.width(),
            words: self.key_words(i).to_vec(),
        }
    }

    fn key_words(&self, i: usize) -> &[u64] {
        &self.keys[i * self.words_per_key..(i + 1) * self.words_per_key]
    }

    /// `psi(z) · psi(k_i)` for every key.
    pub fn scores(&self, z: &[T]) -> Result<Vec<T>> {
        let h = self.hash(z)?;
        Ok((0..self.len)
            .map(|i| T::lit(score(self.width(), hamming(&h.words, self.key_words(i)))))
            .collect())
    }
}

/// Approximate scores of every key against the aggregated query `z`,
/// hashing `z` once.
pub fn hashed_rank<T: Real>(db: &KeyDatabase<T>, z: &[T]) -> Result<Vec<T>> {
    db.sketch()?.scores(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::IapError;

    #[test]
    fn packing_round_trip() {
        let s: Vec<bool> = (0..130).map(|i| i % 3 == 0).collect();
        let p = PackedSigns::from_signs(s.iter().copied());
        assert_eq!(p.len(), 130);
        assert_eq!(p.words().len(), 3);
        let v: Vec<f64> = p.unpack();
        for (b, x) in s.iter().zip(&v) {
            assert_eq!(*b, *x > 0.0);
        }
        assert!((p.dot(&p) - 1.0).abs() < 1e-15);
        assert!((dot(&v, &v) - p.dot(&p)).abs() < 1e-12);
    }

    #[test]
    fn hash_properties() {
        let g = gaussian_matrix::<f64>(100, 6, &RngStream::new(1, 0)).unwrap();
        let z = [0.3, -1.0, 2.0, 0.0, 0.5, 0.1];
        let h = sign_hash(&z, &g).unwrap();
        assert!((dot(&h, &h) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = z.iter().map(|x| -x).collect();
        let hn = sign_hash(&neg, &g).unwrap();
        assert!(h.iter().zip(&hn).all(|(a, b)| *a == -*b));
        assert!(h.iter().all(|x| (x.abs() - 0.1).abs() < 1e-15));
        assert!(sign_hash(&[0.0; 6], &g).unwrap().iter().all(|&x| x > 0.0));
        assert!(sign_hash(&z[..5], &g).is_err());
    }

    #[test]
    fn packed_scores_match_vectors() {
        let s = RngStream::new(2, 0);
        let keys = gaussian_matrix::<f64>(20, 8, &s.substream(0)).unwrap();
        let sketch = SignHashSketch::build(&keys, 200, &s.substream(1)).unwrap();
        let z = keys.row(3).to_vec();
        let scores = sketch.scores(&z).unwrap();
        let hz = sign_hash(&z, sketch.projection()).unwrap();
        for i in 0..20 {
            let hk = sign_hash(keys.row(i), sketch.projection()).unwrap();
            assert!((scores[i] - dot(&hz, &hk)).abs() < 1e-12);
        }
        assert_eq!(scores[3], 1.0);
    }

    #[test]
    fn duplicate_keys_share_scores() {
        let s = RngStream::new(3, 0);
        let base = gaussian_matrix::<f64>(5, 4, &s.substream(0)).unwrap();
        let keys = base.select_rows(&[0, 1, 1, 2, 0]).unwrap();
        let db = KeyDatabase::new(keys, 0)
            .with_sketch(128, &s.substream(1))
            .unwrap();
        let r = hashed_rank(&db, &[0.2, 0.1, -0.3, 1.0]).unwrap();
        assert_eq!(r[1], r[2]);
        assert_eq!(r[0], r[4]);
        let bare = KeyDatabase::new(base, 0);
        assert!(matches!(
            hashed_rank(&bare, &[0.0; 4]),
            Err(IapError::State(_))
        ));
    }
}
