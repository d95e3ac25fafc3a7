//! Per-domain memory banks of momentum-averaged historical features.
//!
//! One slot per instance, permanently bound to its row index. Entries store
//! raw (unnormalized) features; consumers normalize as needed.

use crate::diffkit::Tensor;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Domain identity carried through banks, prototype sets, and logs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Domain {
    A,
    B,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::A => write!(f, "A"),
            Domain::B => write!(f, "B"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: Tensor,
    pub beta: f64,
    pub domain: Domain,
}

impl MemoryBank {
    /// Initialize every slot with the encoder's current feature of its
    /// instance.
    pub fn init(
        encoder: &EncoderParams,
        domain_features: &Tensor,
        beta: f64,
        domain: Domain,
    ) -> Result<Self> {
        if !domain_features.is_matrix() || domain_features.rows() == 0 {
            return Err(Error::Empty {
                what: format!("domain {domain} feature matrix"),
            });
        }
        let entries = encoder.encode(domain_features)?;
        Ok(Self {
            entries,
            beta,
            domain,
        })
    }

    /// Wrap an existing feature matrix (checkpoint restore).
    pub fn from_entries(entries: Tensor, beta: f64, domain: Domain) -> Result<Self> {
        if !entries.is_matrix() || entries.rows() == 0 {
            return Err(Error::Empty {
                what: format!("domain {domain} bank"),
            });
        }
        Ok(Self {
            entries,
            beta,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty banks
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        self.entries.row(i)
    }

    /// m_i <- beta m_i + (1 - beta) f. Only slot `i` changes.
    pub fn momentum_update(&mut self, i: usize, fresh: &[f64]) -> Result<()> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                what: format!("bank {} entry", self.domain),
                index: i,
                len: self.len(),
            });
        }
        if fresh.len() != self.dim() {
            return Err(Error::shape_mismatch("momentum_update", &[self.dim()], &[fresh.len()]));
        }
        let beta = self.beta;
        let d = self.dim();
        let row = &mut self.entries.data_mut()[i * d..(i + 1) * d];
        for (m, &f) in row.iter_mut().zip(fresh.iter()) {
            *m = beta * *m + (1.0 - beta) * f;
        }
        Ok(())
    }

    /// Arithmetic mean of all entries, fixed summation order.
    pub fn mean(&self) -> Vec<f64> {
        let (n, d) = (self.len(), self.dim());
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(self.entry(i).iter()) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Layer;
    use rand::Rng;

    fn identity_encoder(d: usize) -> EncoderParams {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        EncoderParams::new(vec![Layer {
            weight: Tensor::matrix(d, d, eye).unwrap(),
            bias: Tensor::zeros(vec![d]),
            relu: false,
        }])
        .unwrap()
    }

    #[test]
    fn identity_encoder_copies_features() {
        let x = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bank = MemoryBank::init(&identity_encoder(2), &x, 0.99, Domain::A).unwrap();
        assert_eq!(bank.entries(), &x);
    }

    #[test]
    fn init_replays_forward_passes() {
        let mut rng = crate::rng::stream(31, "bank-init");
        let enc = EncoderParams::init(4, &[5], 3, &mut rng);
        let x = Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let bank = MemoryBank::init(&enc, &x, 0.99, Domain::B).unwrap();
        for i in 0..3 {
            let single = Tensor::matrix(1, 4, x.row(i).to_vec()).unwrap();
            let f = enc.encode(&single).unwrap();
            assert_eq!(bank.entry(i), f.data());
        }
    }

    #[test]
    fn zero_weight_encoder_gives_zero_entries() {
        let enc = EncoderParams::new(vec![Layer {
            weight: Tensor::matrix(2, 2, vec![0.0; 4]).unwrap(),
            bias: Tensor::zeros(vec![2]),
            relu: false,
        }])
        .unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bank = MemoryBank::init(&enc, &x, 0.99, Domain::A).unwrap();
        assert!(bank.entries().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn momentum_update_examples() {
        let entries = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let mut bank = MemoryBank::from_entries(entries.clone(), 0.99, Domain::A).unwrap();
        bank.momentum_update(0, &[0.0, 1.0]).unwrap();
        assert!((bank.entry(0)[0] - 0.99).abs() <= 1e-12);
        assert!((bank.entry(0)[1] - 0.01).abs() <= 1e-12);

        let mut no_memory = MemoryBank::from_entries(entries.clone(), 0.0, Domain::A).unwrap();
        no_memory.momentum_update(0, &[7.0, -3.0]).unwrap();
        assert_eq!(no_memory.entry(0), &[7.0, -3.0]);

        let mut frozen = MemoryBank::from_entries(entries, 1.0, Domain::A).unwrap();
        frozen.momentum_update(0, &[7.0, -3.0]).unwrap();
        assert_eq!(frozen.entry(0), &[1.0, 0.0]);
    }

    #[test]
    fn update_out_of_range_is_an_error() {
        let entries = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let mut bank = MemoryBank::from_entries(entries, 0.99, Domain::A).unwrap();
        assert!(bank.momentum_update(2, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn bank_mean_examples() {
        let entries = Tensor::matrix(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let bank = MemoryBank::from_entries(entries, 0.99, Domain::A).unwrap();
        assert_eq!(bank.mean(), vec![2.0, 2.0]);

        let single = Tensor::matrix(1, 3, vec![4.0, -1.0, 0.5]).unwrap();
        let bank = MemoryBank::from_entries(single, 0.99, Domain::B).unwrap();
        assert_eq!(bank.mean(), vec![4.0, -1.0, 0.5]);
    }

    #[test]
    fn bank_mean_matches_two_pass_oracle() {
        let mut rng = crate::rng::stream(17, "bank-mean");
        let data: Vec<f64> = (0..100 * 4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let entries = Tensor::matrix(100, 4, data).unwrap();
        let bank = MemoryBank::from_entries(entries.clone(), 0.99, Domain::A).unwrap();
        let got = bank.mean();
        // Independent two-pass mean: accumulate per column over rows twice
        // with compensation by pre-dividing.
        for c in 0..4 {
            let mut s = 0.0;
            for r in 0..100 {
                s += entries.row(r)[c] / 100.0;
            }
            assert!((got[c] - s).abs() <= 1e-12);
        }
    }

    /// Replay test: every entry is a convex combination of its initial value
    /// and the observed features, with coefficients summing to one.
    #[test]
    fn entries_are_convex_combinations_under_replay() {
        let mut rng = crate::rng::stream(23, "bank-replay");
        let init = Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut bank = MemoryBank::from_entries(init.clone(), 0.99, Domain::A).unwrap();

        // coeffs[i] tracks (initial coefficient, per-update coefficients).
        let mut coeffs: Vec<(f64, Vec<(Vec<f64>, f64)>)> = (0..4).map(|_| (1.0, vec![])).collect();
        for step in 0..60 {
            let i = step % 4;
            let fresh: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            bank.momentum_update(i, &fresh).unwrap();
            let (c0, hist) = &mut coeffs[i];
            *c0 *= 0.99;
            for (_, w) in hist.iter_mut() {
                *w *= 0.99;
            }
            hist.push((fresh, 0.01));
        }
        for i in 0..4 {
            let (c0, hist) = &coeffs[i];
            let total: f64 = c0 + hist.iter().map(|(_, w)| w).sum::<f64>();
            assert!((total - 1.0).abs() <= 1e-9);
            for c in 0..3 {
                let mut expect = c0 * init.row(i)[c];
                for (f, w) in hist {
                    expect += w * f[c];
                }
                assert!((bank.entry(i)[c] - expect).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn updating_one_entry_leaves_others_untouched() {
        let entries = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut bank = MemoryBank::from_entries(entries, 0.5, Domain::A).unwrap();
        bank.momentum_update(1, &[0.0, 0.0]).unwrap();
        assert_eq!(bank.entry(0), &[1.0, 2.0]);
        assert_eq!(bank.entry(2), &[5.0, 6.0]);
    }
}
