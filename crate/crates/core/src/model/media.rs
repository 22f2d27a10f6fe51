use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// For each text position, the index of the media item whose `[image]` token
/// is the most recent at or before that position.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaLocations(pub Vec<Option<usize>>);

impl MediaLocations {
    /// Locations implied by the positions of `image_token` in `ids`.
    pub fn from_ids(ids: &[u32], image_token: u32) -> Self {
        let mut current = None;
        let mut next = 0;
        let locs = ids
            .iter()
            .map(|&id| {
                if id == image_token {
                    current = Some(next);
                    next += 1;
                }
                current
            })
            .collect();
        Self(locs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Option<usize>] {
        &self.0
    }

    /// Checks the sequence invariants: non-decreasing, no gaps, and every
    /// index below `n_media`.
    pub fn validate(&self, n_media: usize) -> Result<()> {
        let mut prev: Option<usize> = None;
        for (t, &loc) in self.0.iter().enumerate() {
            match (prev, loc) {
                (_, Some(m)) if m >= n_media => {
                    return Err(Error::Consistency(format!(
                        "position {t} refers to media {m} but only {n_media} were supplied"
                    )))
                }
                (Some(p), Some(m)) if m < p => {
                    return Err(Error::Consistency(format!(
                        "media locations decrease at position {t} ({p} -> {m})"
                    )))
                }
                (Some(p), Some(m)) if m > p + 1 => {
                    return Err(Error::Consistency(format!(
                        "media locations skip from {p} to {m} at position {t}"
                    )))
                }
                (None, Some(m)) if m != 0 => {
                    return Err(Error::Consistency(format!("first media referenced is {m}, not 0")))
                }
                _ => {}
            }
            if loc.is_some() {
                prev = loc;
            }
        }
        Ok(())
    }

    /// Row-major `T × (n_media·n_latents)` visibility: position `t` may see the
    /// latents of media `m` iff `m == self[t]`.
    pub fn cross_attention_mask(&self, n_media: usize, n_latents: usize) -> Vec<bool> {
        let width = n_media * n_latents;
        let mut mask = vec![false; self.0.len() * width];
        for (t, loc) in self.0.iter().enumerate() {
            if let Some(m) = *loc {
                let row = &mut mask[t * width..(t + 1) * width];
                row[m * n_latents..(m + 1) * n_latents].fill(true);
            }
        }
        mask
    }
}

/// Row-major `T × T` causal visibility.
pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut mask = vec![false; t * t];
    for i in 0..t {
        mask[i * t..i * t + i + 1].fill(true);
    }
    mask
}
