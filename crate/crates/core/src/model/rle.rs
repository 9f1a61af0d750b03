use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary mask stored as alternating background/foreground run lengths over
/// the row-major pixel order. The first run is always background and may be
/// zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub width: u32,
    pub height: u32,
    pub runs: Vec<u32>,
}

impl RleMask {
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn run_total(&self) -> u64 {
        self.runs.iter().map(|&r| r as u64).sum()
    }

    pub fn check(&self) -> Result<()> {
        let total = self.run_total();
        if total != self.pixel_count() as u64 {
            return Err(Error::SizeMismatch {
                what: "rle run total",
                expected: self.pixel_count(),
                got: total as usize,
            });
        }
        Ok(())
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Random-access view that answers per-pixel membership without
    /// materializing the bitmap.
    pub fn lookup(&self) -> Result<MaskLookup> {
        self.check()?;
        let mut starts = Vec::with_capacity(self.runs.len() / 2 + 1);
        let mut ends = Vec::with_capacity(self.runs.len() / 2 + 1);
        let mut offset = 0u64;
        for (i, &run) in self.runs.iter().enumerate() {
            if i % 2 == 1 && run > 0 {
                starts.push(offset);
                ends.push(offset + run as u64);
            }
            offset += run as u64;
        }
        Ok(MaskLookup {
            width: self.width,
            height: self.height,
            starts,
            ends,
        })
    }
}

/// Sorted foreground intervals of an [`RleMask`].
#[derive(Debug, Clone)]
pub struct MaskLookup {
    width: u32,
    height: u32,
    starts: Vec<u64>,
    ends: Vec<u64>,
}

impl MaskLookup {
    pub fn contains(&self, u: u32, v: u32) -> bool {
        if u >= self.width || v >= self.height {
            return false;
        }
        let idx = v as u64 * self.width as u64 + u as u64;
        // last interval starting at or before idx
        let pos = self.starts.partition_point(|&s| s <= idx);
        pos > 0 && idx < self.ends[pos - 1]
    }
}

pub fn rle_encode(bitmap: &[bool], width: u32, height: u32) -> Result<RleMask> {
    let expected = width as usize * height as usize;
    if bitmap.len() != expected {
        return Err(Error::SizeMismatch {
            what: "bitmap",
            expected,
            got: bitmap.len(),
        });
    }
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for &bit in bitmap {
        if bit != current {
            runs.push(count);
            current = bit;
            count = 0;
        }
        count += 1;
    }
    runs.push(count);
    Ok(RleMask {
        width,
        height,
        runs,
    })
}

pub fn rle_decode(mask: &RleMask) -> Result<Vec<bool>> {
    mask.check()?;
    let mut bitmap = Vec::with_capacity(mask.pixel_count());
    for (i, &run) in mask.runs.iter().enumerate() {
        bitmap.extend(std::iter::repeat_n(i % 2 == 1, run as usize));
    }
    Ok(bitmap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_examples() {
        assert_eq!(rle_encode(&[false; 4], 2, 2).unwrap().runs, vec![4]);
        assert_eq!(rle_encode(&[true; 4], 2, 2).unwrap().runs, vec![0, 4]);
        assert_eq!(
            rle_encode(&[false, true, true, false], 4, 1).unwrap().runs,
            vec![1, 2, 1]
        );
    }

    #[test]
    fn decode_examples() {
        let empty = RleMask {
            width: 2,
            height: 2,
            runs: vec![4],
        };
        assert_eq!(rle_decode(&empty).unwrap(), vec![false; 4]);
        let full = RleMask {
            width: 2,
            height: 2,
            runs: vec![0, 4],
        };
        assert_eq!(rle_decode(&full).unwrap(), vec![true; 4]);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(rle_encode(&[true; 3], 2, 2).is_err());
        let bad = RleMask {
            width: 2,
            height: 2,
            runs: vec![1, 2],
        };
        assert!(rle_decode(&bad).is_err());
        assert!(bad.lookup().is_err());
    }

    #[test]
    fn seeded_16x16_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..32 {
            let density: f64 = rng.random();
            let bitmap: Vec<bool> = (0..256).map(|_| rng.random_bool(density)).collect();
            let mask = rle_encode(&bitmap, 16, 16).unwrap();
            assert_eq!(mask.run_total(), 256);
            assert_eq!(rle_decode(&mask).unwrap(), bitmap);
        }
    }

    proptest! {
        #[test]
        fn lookup_agrees_with_decode(
            (w, h, bits) in (1u32..12, 1u32..12).prop_flat_map(|(w, h)| {
                (Just(w), Just(h), proptest::collection::vec(any::<bool>(), (w * h) as usize))
            })
        ) {
            let mask = rle_encode(&bits, w, h).unwrap();
            prop_assert_eq!(mask.run_total(), (w * h) as u64);
            prop_assert_eq!(mask.area(), bits.iter().filter(|&&b| b).count() as u64);
            let lookup = mask.lookup().unwrap();
            for v in 0..h {
                for u in 0..w {
                    prop_assert_eq!(lookup.contains(u, v), bits[(v * w + u) as usize]);
                }
            }
            prop_assert!(!lookup.contains(w, 0));
        }
    }
}
