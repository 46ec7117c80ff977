use super::schedule::AtrousSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Key/value bands gathered for every query row.
#[derive(Debug, Clone)]
pub struct BandGather {
    /// `H × (2J+1)·W × C`.
    pub bands: Tensor,
    /// `H × (2J+1)·W`, `false` where the band row fell into padding.
    pub valid: Vec<bool>,
}

/// Deliberate mis-gather used as a negative control by the verification
/// commands: band `band` is read `shift` rows away from where its mask says.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandFault {
    pub band: usize,
    pub shift: isize,
}

/// Concatenates, along the width axis, the rows `[H + o, 2H + o)` of the
/// padded embedding `padded` (`3H × W × C`) for every offset `o` of the
/// schedule.
pub fn band_gather(padded: &Tensor, schedule: &AtrousSchedule) -> Result<BandGather> {
    band_gather_with(padded, schedule, None)
}

#[doc(hidden)]
pub fn band_gather_with(
    padded: &Tensor,
    schedule: &AtrousSchedule,
    fault: Option<BandFault>,
) -> Result<BandGather> {
    let h = schedule.extent();
    let (rows, w) = match *padded.shape() {
        [r, w, _] => (r, w),
        _ => return Err(Error::dim("band_gather", format!("expected 3H×W×C, got {:?}", padded.shape()))),
    };
    if rows != 3 * h {
        return Err(Error::dim(
            "band_gather",
            format!("padded extent {rows} is not 3 × {h}"),
        ));
    }
    let mut pieces = Vec::with_capacity(schedule.bands());
    for (b, &o) in schedule.offsets().iter().enumerate() {
        if o.unsigned_abs() > h {
            return Err(Error::Schedule { offset: o, extent: h });
        }
        let read = match fault {
            Some(f) if f.band == b => (o + f.shift).clamp(-(h as isize), h as isize),
            _ => o,
        };
        pieces.push(padded.narrow(0, (h as isize + read) as usize, h)?);
    }
    let bands = if pieces.len() == 1 {
        pieces.pop().unwrap()
    } else {
        Tensor::concat(&pieces, 1)?
    };
    let l = schedule.bands() * w;
    let mut valid = Vec::with_capacity(h * l);
    for r in 0..h {
        for &o in schedule.offsets() {
            let live = schedule.is_live(r, o);
            valid.extend(std::iter::repeat_n(live, w));
        }
    }
    Ok(BandGather { bands, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::schedule::atrous_schedule;

    fn embedding(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|v| v as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn zero_density_returns_center_band() {
        let e = embedding(3, 4, 2);
        let padded = e.pad_axis(0, 3, 3, 0.0).unwrap();
        let g = band_gather(&padded, &atrous_schedule(3, 0).unwrap()).unwrap();
        assert_eq!(g.bands.data(), e.data());
        assert!(g.valid.iter().all(|&v| v));
    }

    #[test]
    fn two_by_two_enumeration() {
        // H=2, W=2, C=1, offsets {0, +1, -1}
        let e = embedding(2, 2, 1);
        let padded = e.pad_axis(0, 2, 2, -9.0).unwrap();
        let s = atrous_schedule(2, 1).unwrap();
        assert_eq!(s.offsets(), &[0, 1, -1]);
        let g = band_gather(&padded, &s).unwrap();
        assert_eq!(g.bands.shape(), &[2, 6, 1]);
        // brute force: band b for row r reads live row r + o, or padding
        let mut want = Vec::new();
        let mut want_valid = Vec::new();
        for r in 0..2isize {
            for o in [0isize, 1, -1] {
                for c in 0..2 {
                    let src = r + o;
                    if (0..2).contains(&src) {
                        want.push(e.data()[(src * 2 + c) as usize]);
                        want_valid.push(true);
                    } else {
                        want.push(-9.0);
                        want_valid.push(false);
                    }
                }
            }
        }
        assert_eq!(g.bands.data(), &want[..]);
        assert_eq!(g.valid, want_valid);
        // row 0 gathers live rows {0, 1} and one padded band
        assert_eq!(&g.valid[..6], &[true, true, true, true, false, false]);
    }

    #[test]
    fn output_width_is_bands_times_width() {
        let padded = Tensor::zeros(&[108, 100, 2], crate::Precision::Double).unwrap();
        let g = band_gather(&padded, &atrous_schedule(36, 4).unwrap()).unwrap();
        assert_eq!(g.bands.shape(), &[36, 900, 2]);
    }

    #[test]
    fn wrong_padding_is_rejected() {
        let padded = Tensor::zeros(&[5, 2, 1], crate::Precision::Double).unwrap();
        assert!(band_gather(&padded, &atrous_schedule(2, 1).unwrap()).is_err());
    }
}
