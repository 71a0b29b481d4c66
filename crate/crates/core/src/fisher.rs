//! Fisher-vector encoding with the improved-kernel normalizations.
//!
//! For descriptors `x_1..x_n` and a diagonal GMM, with `u = (x - mu_k)/sigma_k`:
//!
//! ```text
//! G_mu_k    = 1/(n sqrt(w_k))   * sum_i gamma_k(x_i) u
//! G_sigma_k = 1/(n sqrt(2 w_k)) * sum_i gamma_k(x_i) (u^2 - 1)
//! ```
//!
//! The weight gradient is not part of the vector, so its length is `2Kd`.

use std::io::{Read, Write};

use crate::binio::{Reader, Writer};
use crate::error::{input, Error, Result};
use crate::gmm::GmmModel;
use crate::reduce::{add_into, tree_reduce};

#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector {
    k: usize,
    d: usize,
    /// Mean block (`K×d`) followed by the sigma block (`K×d`).
    data: Vec<f64>,
    power_normalized: bool,
    l2_normalized: bool,
    zero: bool,
}

impl FisherVector {
    pub fn from_parts(k: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * k * d {
            return input(format!(
                "fisher vector of length {} for K={k}, d={d}",
                data.len()
            ));
        }
        Ok(Self {
            k,
            d,
            data,
            power_normalized: false,
            l2_normalized: false,
            zero: false,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn mean_block(&self) -> &[f64] {
        &self.data[..self.k * self.d]
    }

    pub fn sigma_block(&self) -> &[f64] {
        &self.data[self.k * self.d..]
    }

    pub fn g_mu(&self, c: usize) -> &[f64] {
        &self.data[c * self.d..(c + 1) * self.d]
    }

    pub fn g_sigma(&self, c: usize) -> &[f64] {
        let off = self.k * self.d;
        &self.data[off + c * self.d..off + (c + 1) * self.d]
    }

    pub fn is_power_normalized(&self) -> bool {
        self.power_normalized
    }

    pub fn is_l2_normalized(&self) -> bool {
        self.l2_normalized
    }

    /// Set by [`l2_normalize`] when the vector had zero norm.
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Raw gradient sums before the `1/(n sqrt(w))` scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherSums {
    pub count: usize,
    /// `sum gamma u` (`K×d`) then `sum gamma (u^2 - 1)` (`K×d`).
    pub sums: Vec<f64>,
}

impl FisherSums {
    pub fn merge(mut self, other: FisherSums) -> FisherSums {
        self.count += other.count;
        self.sums = add_into(self.sums, other.sums);
        self
    }

    pub fn finish(&self, model: &GmmModel) -> Result<FisherVector> {
        if self.count == 0 {
            return input("cannot encode an empty descriptor set");
        }
        let (k, d) = (model.k(), model.d());
        let n = self.count as f64;
        let mut data = self.sums.clone();
        for c in 0..k {
            let w = model.weights()[c];
            let smu = 1.0 / (n * w.sqrt());
            let ssig = 1.0 / (n * (2.0 * w).sqrt());
            data[c * d..(c + 1) * d].iter_mut().for_each(|v| *v *= smu);
            data[(k + c) * d..(k + c + 1) * d]
                .iter_mut()
                .for_each(|v| *v *= ssig);
        }
        FisherVector::from_parts(k, d, data)
    }
}

/// Accumulates gradient sums over flat row-major descriptors in f64 with a
/// fixed block/tree order.
pub fn fisher_sums(model: &GmmModel, data: &[f32]) -> Result<FisherSums> {
    let (k, d) = (model.k(), model.d());
    if !data.len().is_multiple_of(d) {
        return input(format!(
            "descriptor buffer is not a multiple of gmm dim {d}"
        ));
    }
    let n = data.len() / d;
    let sums = tree_reduce(
        n,
        |rows| {
            let mut acc = vec![0.0; 2 * k * d];
            let mut g = vec![0.0; k];
            for i in rows.clone() {
                let x = &data[i * d..(i + 1) * d];
                model.posteriors_into(x, &mut g);
                for (c, &gc) in g.iter().enumerate() {
                    if gc == 0.0 {
                        continue;
                    }
                    let mu = model.mean(c);
                    let sd = model.sigma(c);
                    let (head, tail) = acc.split_at_mut(k * d);
                    let am = &mut head[c * d..(c + 1) * d];
                    let asg = &mut tail[c * d..(c + 1) * d];
                    for j in 0..d {
                        let u = (f64::from(x[j]) - mu[j]) / sd[j];
                        am[j] += gc * u;
                        asg[j] += gc * (u * u - 1.0);
                    }
                }
            }
            FisherSums {
                count: rows.len(),
                sums: acc,
            }
        },
        FisherSums::merge,
    )
    .unwrap_or(FisherSums {
        count: 0,
        sums: vec![0.0; 2 * k * d],
    });
    Ok(sums)
}

/// Average-gradient Fisher vector of a non-empty descriptor subset.
pub fn encode_fv(model: &GmmModel, data: &[f32]) -> Result<FisherVector> {
    fisher_sums(model, data)?.finish(model)
}

/// Signed power normalization `z -> sign(z) |z|^alpha`.
pub fn power_normalize(mut fv: FisherVector, alpha: f64) -> Result<FisherVector> {
    if fv.power_normalized {
        return Err(Error::State(
            "fisher vector is already power-normalized".into(),
        ));
    }
    power_normalize_slice(&mut fv.data, alpha);
    fv.power_normalized = true;
    fv.l2_normalized = false;
    Ok(fv)
}

pub fn power_normalize_slice(v: &mut [f64], alpha: f64) {
    if alpha == 1.0 {
        return;
    }
    for z in v.iter_mut() {
        *z = z.signum() * z.abs().powf(alpha);
        if *z == 0.0 {
            *z = 0.0;
        }
    }
}

/// Scales to unit Euclidean norm; a zero vector is returned unchanged with
/// its zero flag set.
pub fn l2_normalize(mut fv: FisherVector) -> FisherVector {
    fv.zero = !l2_normalize_slice(&mut fv.data);
    fv.l2_normalized = true;
    fv
}

/// In-place `v / ||v||`; returns `false` (and leaves `v`) when the norm is 0.
pub fn l2_normalize_slice(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Power normalization with `alpha = 0.5` followed by l2.
pub fn improved(fv: FisherVector) -> Result<FisherVector> {
    Ok(l2_normalize(power_normalize(fv, 0.5)?))
}

const MAGIC: &[u8; 4] = b"MPPF";

/// Bits of the `MPPF` flags byte. The high nibble carries the pooling
/// strategy tag (0 for a plain Fisher vector).
pub mod flags {
    pub const POWER: u8 = 1;
    pub const L2: u8 = 2;
    pub const ZERO: u8 = 4;
}

/// `MPPF`: magic, version, K, d, flags:u8, payload length, payload f32.
pub fn write_fv_payload(
    w: impl Write,
    k: usize,
    d: usize,
    flag_byte: u8,
    payload: &[f64],
) -> Result<()> {
    let mut w = Writer::new(w);
    w.magic(MAGIC)?;
    w.usize(k)?;
    w.usize(d)?;
    w.u8(flag_byte)?;
    w.usize(payload.len())?;
    w.f64s_as_f32(payload)?;
    w.finish()?;
    Ok(())
}

pub struct FvPayload {
    pub k: usize,
    pub d: usize,
    pub flags: u8,
    pub payload: Vec<f64>,
}

pub fn read_fv_payload(r: impl Read) -> Result<FvPayload> {
    let mut r = Reader::new(r, "fisher vector");
    r.magic(MAGIC)?;
    let k = r.usize()?;
    let d = r.usize()?;
    let flags = r.u8()?;
    let len = r.usize()?;
    let payload = r.f32s_as_f64(len)?;
    r.end()?;
    Ok(FvPayload {
        k,
        d,
        flags,
        payload,
    })
}

pub fn write_fv(fv: &FisherVector, w: impl Write) -> Result<()> {
    let mut f = 0u8;
    if fv.power_normalized {
        f |= flags::POWER;
    }
    if fv.l2_normalized {
        f |= flags::L2;
    }
    if fv.zero {
        f |= flags::ZERO;
    }
    write_fv_payload(w, fv.k, fv.d, f, &fv.data)
}

pub fn read_fv(r: impl Read) -> Result<FisherVector> {
    let p = read_fv_payload(r)?;
    if p.flags >> 4 != 0 {
        return Err(Error::Format {
            what: "fisher vector",
            msg: "file holds a pooled representation".into(),
        });
    }
    let mut fv = FisherVector::from_parts(p.k, p.d, p.payload)?;
    fv.power_normalized = p.flags & flags::POWER != 0;
    fv.l2_normalized = p.flags & flags::L2 != 0;
    fv.zero = p.flags & flags::ZERO != 0;
    Ok(fv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_gmm(d: usize) -> GmmModel {
        GmmModel::new(vec![1.0], vec![0.25; d], vec![0.5; d]).unwrap()
    }

    #[test]
    fn descriptor_at_mean() {
        let fv = encode_fv(&unit_gmm(3), &[0.25, 0.25, 0.25]).unwrap();
        assert!(fv.mean_block().iter().all(|&v| v == 0.0));
        let expect = -std::f64::consts::FRAC_1_SQRT_2;
        assert!(fv.sigma_block().iter().all(|&v| (v - expect).abs() < 1e-15));
        assert_eq!(fv.len(), 6);
    }

    #[test]
    fn empty_subset_is_error() {
        assert!(encode_fv(&unit_gmm(2), &[]).is_err());
    }

    #[test]
    fn power_arithmetic() {
        let fv = FisherVector::from_parts(1, 1, vec![4.0, -9.0]).unwrap();
        let p = power_normalize(fv, 0.5).unwrap();
        assert_eq!(p.as_slice(), &[2.0, -3.0]);
        assert!(matches!(power_normalize(p, 0.5), Err(Error::State(_))));
    }

    #[test]
    fn power_alpha_one_and_zero_vector() {
        let v = vec![0.3, -1.7];
        let fv = FisherVector::from_parts(1, 1, v.clone()).unwrap();
        assert_eq!(power_normalize(fv, 1.0).unwrap().as_slice(), v.as_slice());
        let z = FisherVector::from_parts(1, 1, vec![0.0, 0.0]).unwrap();
        assert_eq!(power_normalize(z, 0.5).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn l2_cases() {
        let fv = l2_normalize(FisherVector::from_parts(1, 1, vec![3.0, 4.0]).unwrap());
        assert_eq!(fv.as_slice(), &[0.6, 0.8]);
        assert!(!fv.is_zero());
        let again = l2_normalize(fv.clone());
        assert_eq!(again.as_slice(), fv.as_slice());
        let z = l2_normalize(FisherVector::from_parts(1, 1, vec![0.0, 0.0]).unwrap());
        assert!(z.is_zero());
        assert_eq!(z.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn file_roundtrip_keeps_flags() {
        let fv = improved(encode_fv(&unit_gmm(2), &[0.0, 1.0, 0.5, 0.5]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_fv(&fv, &mut buf).unwrap();
        let back = read_fv(buf.as_slice()).unwrap();
        assert!(back.is_power_normalized() && back.is_l2_normalized());
        assert!((back.norm() - 1.0).abs() < 1e-6);
    }
}
