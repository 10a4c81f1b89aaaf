use super::{DataError, Result, Sample, EOS, PAD, SOS};

/// One padded training batch with both target directions.
///
/// Token matrices are row-major `[batch, len]`. Both directions share
/// `token_mask`, since their cores have equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct BiBatch {
    pub batch: usize,
    pub len: usize,
    /// `[batch, 1, height, width]`, padded bottom/right with background.
    pub images: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Unpadded `(height, width)` of each image.
    pub extents: Vec<(usize, usize)>,
    pub l2r_input: Vec<usize>,
    pub l2r_target: Vec<usize>,
    pub r2l_input: Vec<usize>,
    pub r2l_target: Vec<usize>,
    /// True where the target is not `PAD`.
    pub token_mask: Vec<bool>,
    pub ids: Vec<String>,
}

impl BiBatch {
    /// `[batch, height, width]`, true inside each image's own extent.
    pub fn image_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.batch * self.height * self.width];
        for (b, &(h, w)) in self.extents.iter().enumerate() {
            for y in 0..h {
                let row = (b * self.height + y) * self.width;
                mask[row..row + w].fill(true);
            }
        }
        mask
    }

    /// Valid target count per row.
    pub fn lengths(&self) -> Vec<usize> {
        self.token_mask.chunks(self.len).map(|r| r.iter().filter(|&&m| m).count()).collect()
    }

    pub fn row<'a>(&self, m: &'a [usize], b: usize) -> &'a [usize] {
        &m[b * self.len..(b + 1) * self.len]
    }
}

/// Pads images to a common size and builds
/// `[SOS, y..] -> [y.., EOS]` and `[EOS, rev y..] -> [rev y.., SOS]` rows.
pub fn make_bibatch(samples: &[&Sample], l_max: usize) -> Result<BiBatch> {
    if samples.is_empty() {
        return Err(DataError::Invalid("empty batch".into()));
    }
    for s in samples {
        if s.tokens.len() + 1 > l_max {
            return Err(DataError::TooLong { id: s.id.clone(), len: s.tokens.len(), l_max });
        }
    }
    let batch = samples.len();
    let height = samples.iter().map(|s| s.image.height).max().unwrap_or(1);
    let width = samples.iter().map(|s| s.image.width).max().unwrap_or(1);
    let mut images = vec![0f32; batch * height * width];
    for (b, s) in samples.iter().enumerate() {
        for y in 0..s.image.height {
            let dst = (b * height + y) * width;
            let src = y * s.image.width;
            images[dst..dst + s.image.width].copy_from_slice(&s.image.pixels[src..src + s.image.width]);
        }
    }
    let n = batch * l_max;
    let (mut l2r_input, mut l2r_target) = (vec![PAD; n], vec![PAD; n]);
    let (mut r2l_input, mut r2l_target) = (vec![PAD; n], vec![PAD; n]);
    let mut token_mask = vec![false; n];
    for (b, s) in samples.iter().enumerate() {
        let o = b * l_max;
        let t = s.tokens.len();
        l2r_input[o] = SOS;
        r2l_input[o] = EOS;
        for (i, &y) in s.tokens.iter().enumerate() {
            l2r_input[o + 1 + i] = y;
            l2r_target[o + i] = y;
            r2l_input[o + t - i] = y;
            r2l_target[o + t - 1 - i] = y;
        }
        l2r_target[o + t] = EOS;
        r2l_target[o + t] = SOS;
        token_mask[o..=o + t].fill(true);
    }
    Ok(BiBatch {
        batch,
        len: l_max,
        images,
        height,
        width,
        extents: samples.iter().map(|s| (s.image.height, s.image.width)).collect(),
        l2r_input,
        l2r_target,
        r2l_input,
        r2l_target,
        token_mask,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}
