use crate::error::{Error, Result};

/// Signed row offsets a query row samples keys from: `0`, then `±d_j` for
/// each rung of the ladder. Rungs that collapse to the same distance after
/// the `d_j >= 1` clamp are kept as separate bands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtrousSchedule {
    extent: usize,
    dilations: Vec<usize>,
    offsets: Vec<isize>,
}

/// `d_j = max(1, floor(extent / 2^(density - j)))` for `j = 0..density`.
pub fn atrous_schedule(extent: usize, density: usize) -> Result<AtrousSchedule> {
    if extent == 0 {
        return Err(Error::Config("schedule extent must be positive".into()));
    }
    let dilations: Vec<usize> = (0..density)
        .map(|j| {
            let shift = (density - j) as u32;
            let d = if shift >= usize::BITS { 0 } else { extent >> shift };
            d.max(1)
        })
        .collect();
    let mut offsets = Vec::with_capacity(2 * density + 1);
    offsets.push(0);
    for &d in &dilations {
        offsets.push(d as isize);
        offsets.push(-(d as isize));
    }
    Ok(AtrousSchedule {
        extent,
        dilations,
        offsets,
    })
}

impl AtrousSchedule {
    /// Live extent along the sampled axis.
    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn density(&self) -> usize {
        self.dilations.len()
    }

    /// The ladder `d_0 <= d_1 <= ... <= d_{J-1}`.
    pub fn dilations(&self) -> &[usize] {
        &self.dilations
    }

    /// All `2J + 1` band offsets, in band order.
    pub fn offsets(&self) -> &[isize] {
        &self.offsets
    }

    pub fn bands(&self) -> usize {
        self.offsets.len()
    }

    /// Whether row `row + offset` lies inside the live extent.
    pub fn is_live(&self, row: usize, offset: isize) -> bool {
        let r = row as isize + offset;
        r >= 0 && (r as usize) < self.extent
    }

    /// Number of bands that land query row `row` on key row `key_row`.
    pub fn multiplicity(&self, row: usize, key_row: usize) -> usize {
        self.offsets
            .iter()
            .filter(|&&o| row as isize + o == key_row as isize)
            .count()
    }
}
