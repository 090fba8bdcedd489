//! COCO run-length encoding of binary masks.
//!
//! Runs are taken over the column-major flattening and always start with a
//! (possibly empty) background run. The compressed string form stores each
//! count in 5-bit groups offset by ASCII 48, with counts after the second
//! stored as deltas against the count two positions earlier.

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u64>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Self {
        let (h, w) = (mask.height, mask.width);
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u64;
        for x in 0..w {
            for y in 0..h {
                let v = mask.data[y * w + x];
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle {
            height: h,
            width: w,
            counts,
        }
    }

    pub fn decode(&self) -> Result<Mask> {
        let (h, w) = (self.height, self.width);
        let total: u64 = self.counts.iter().sum();
        if total != (h * w) as u64 {
            return Err(Error::Data(format!(
                "run lengths sum to {total}, mask has {} pixels",
                h * w
            )));
        }
        let mut mask = Mask::zeros(h, w);
        let mut pos = 0usize;
        for (i, &c) in self.counts.iter().enumerate() {
            let c = c as usize;
            if i % 2 == 1 {
                for k in pos..pos + c {
                    let (x, y) = (k / h, k % h);
                    mask.data[y * w + x] = 1;
                }
            }
            pos += c;
        }
        Ok(mask)
    }

    /// Foreground pixel count, read straight from the runs.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }

    /// The compressed counts string.
    pub fn to_compressed(&self) -> String {
        let mut out = Vec::new();
        for (i, &c) in self.counts.iter().enumerate() {
            let mut x = c as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            loop {
                let mut c = (x & 0x1f) as u8;
                x >>= 5;
                let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    c |= 0x20;
                }
                out.push(c + 48);
                if !more {
                    break;
                }
            }
        }
        String::from_utf8(out).expect("encoded bytes are ASCII")
    }

    /// Parses a compressed counts string. Errors carry the offending byte offset.
    pub fn from_compressed(height: usize, width: usize, s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        let mut counts: Vec<u64> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let start = p;
            let mut x: i64 = 0;
            let mut k = 0u32;
            loop {
                let Some(&b) = bytes.get(p) else {
                    return Err(Error::Parse {
                        offset: p,
                        msg: "counts string ends inside a value".into(),
                    });
                };
                if !(48..48 + 64).contains(&b) {
                    return Err(Error::Parse {
                        offset: p,
                        msg: format!("byte 0x{b:02x} is outside the RLE alphabet"),
                    });
                }
                if k >= 12 {
                    return Err(Error::Parse {
                        offset: p,
                        msg: "run length does not fit in 60 bits".into(),
                    });
                }
                let c = (b - 48) as i64;
                x |= (c & 0x1f) << (5 * k);
                let more = c & 0x20 != 0;
                p += 1;
                k += 1;
                if !more {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
            }
            let m = counts.len();
            if m > 2 {
                x += counts[m - 2] as i64;
            }
            if x < 0 {
                return Err(Error::Parse {
                    offset: start,
                    msg: format!("run {m} decodes to negative length {x}"),
                });
            }
            counts.push(x as u64);
        }
        let total: u64 = counts.iter().sum();
        if total != (height * width) as u64 {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: format!("run lengths sum to {total}, expected {}", height * width),
            });
        }
        Ok(Rle {
            height,
            width,
            counts,
        })
    }
}
