//! Binary-to-image transforms and their inversion onto payload bytes.
//!
//! A binary of `n` bytes is laid out row-major in a `D x D` square with
//! `D = floor(sqrt(n))`; the trailing `n - D^2` bytes are set aside. The
//! square is reduced to [`IMAGE_DIM`]` x `[`IMAGE_DIM`] by averaging blocks
//! whose row and column bounds are `floor(i * D / 100)`. Squares smaller
//! than the output are zero padded instead.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Side length of classifier input images.
pub const IMAGE_DIM: usize = 100;

/// Row-major grey-scale image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GreyImage<S> {
    width: usize,
    height: usize,
    pixels: Vec<S>,
}

impl<S: Scalar> GreyImage<S> {
    pub fn new(width: usize, height: usize, pixels: Vec<S>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height} pixels"),
                found: format!("{} values", pixels.len()),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![S::zero(); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[S] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [S] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<S> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> S {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| quantize(p).0));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Rounds `255 * v` half away from zero and clamps to a byte. The flag
/// reports whether clamping changed the value.
pub fn quantize<S: Scalar>(v: S) -> (u8, bool) {
    let q = (v * S::of(255.0)).round();
    if q < S::zero() {
        (0, true)
    } else if q > S::of(255.0) {
        (255, true)
    } else {
        (q.to_u8().unwrap_or(0), false)
    }
}

fn byte_pixel<S: Scalar>(b: u8) -> S {
    S::of(f64::from(b) / 255.0)
}

/// Lays the binary out as a `D x D` square; returns the square and the
/// cropped tail.
pub fn bytes_to_square<S: Scalar>(bytes: &[u8]) -> Result<(GreyImage<S>, Vec<u8>)> {
    if bytes.is_empty() {
        return Err(Error::EmptyBinary);
    }
    let d = square_dim(bytes.len());
    let pixels = bytes[..d * d].iter().map(|&b| byte_pixel(b)).collect();
    Ok((
        GreyImage {
            width: d,
            height: d,
            pixels,
        },
        bytes[d * d..].to_vec(),
    ))
}

/// `floor(sqrt(n))`, exact for every `usize`.
pub fn square_dim(n: usize) -> usize {
    let mut d = (n as f64).sqrt() as usize;
    while d * d > n {
        d -= 1;
    }
    while (d + 1) * (d + 1) <= n {
        d += 1;
    }
    d
}

/// Block boundaries along one axis: `IMAGE_DIM + 1` nondecreasing entries
/// from 0 to `d`.
pub fn partition(d: usize) -> Vec<usize> {
    (0..=IMAGE_DIM)
        .map(|i| {
            if d >= IMAGE_DIM {
                i * d / IMAGE_DIM
            } else {
                i.min(d)
            }
        })
        .collect()
}

/// Everything needed to map an adversarial image back onto the binary.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleRecord {
    pub square_dim: usize,
    pub tail: Vec<u8>,
    pub row_bounds: Vec<usize>,
    pub col_bounds: Vec<usize>,
    /// `IMAGE_DIM^2` flags, set where the group holds at least one payload byte.
    pub mask_m1: Vec<bool>,
    /// Sorted payload byte offsets inside each group (source of `M2`).
    pub payload_positions: Vec<Vec<usize>>,
}

impl DownsampleRecord {
    /// Square-image row and column ranges averaged into output pixel `(i, j)`.
    pub fn group(&self, i: usize, j: usize) -> (Range<usize>, Range<usize>) {
        (
            self.row_bounds[i]..self.row_bounds[i + 1],
            self.col_bounds[j]..self.col_bounds[j + 1],
        )
    }

    pub fn group_size(&self, i: usize, j: usize) -> usize {
        let (r, c) = self.group(i, j);
        r.len() * c.len()
    }

    pub fn editable_pixels(&self) -> usize {
        self.mask_m1.iter().filter(|&&m| m).count()
    }

    /// Per-pixel interval of group means reachable by rewriting only the
    /// payload bytes. Pixels outside `M1` get the degenerate interval of
    /// their current value.
    pub fn reachable_ranges<S: Scalar>(&self, original: &[u8]) -> Result<(Vec<S>, Vec<S>)> {
        self.check_len(original)?;
        let forward = block_means::<S>(original, self.square_dim, &self.row_bounds, &self.col_bounds);
        let mut lower = forward.clone();
        let mut upper = forward;
        for idx in 0..IMAGE_DIM * IMAGE_DIM {
            if !self.mask_m1[idx] {
                continue;
            }
            let (i, j) = (idx / IMAGE_DIM, idx % IMAGE_DIM);
            let size = S::of(self.group_size(i, j) as f64);
            let fixed = self.fixed_sum::<S>(original, i, j);
            let editable = S::of(self.payload_positions[idx].len() as f64);
            lower[idx] = fixed / size;
            upper[idx] = (fixed + editable) / size;
        }
        Ok((lower, upper))
    }

    /// Sum of the non-payload pixels of group `(i, j)`.
    fn fixed_sum<S: Scalar>(&self, original: &[u8], i: usize, j: usize) -> S {
        let d = self.square_dim;
        let (rows, cols) = self.group(i, j);
        let editable = &self.payload_positions[i * IMAGE_DIM + j];
        let mut sum = S::zero();
        for r in rows {
            for c in cols.clone() {
                let off = r * d + c;
                if editable.binary_search(&off).is_err() {
                    sum += byte_pixel::<S>(original[off]);
                }
            }
        }
        sum
    }

    fn check_len(&self, original: &[u8]) -> Result<()> {
        let expected = self.square_dim * self.square_dim + self.tail.len();
        if original.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} bytes"),
                found: format!("{} bytes", original.len()),
            });
        }
        Ok(())
    }
}

fn block_means<S: Scalar>(bytes: &[u8], d: usize, rows: &[usize], cols: &[usize]) -> Vec<S> {
    let mut out = vec![S::zero(); IMAGE_DIM * IMAGE_DIM];
    for i in 0..IMAGE_DIM {
        for j in 0..IMAGE_DIM {
            let (r0, r1, c0, c1) = (rows[i], rows[i + 1], cols[j], cols[j + 1]);
            let size = (r1 - r0) * (c1 - c0);
            if size == 0 {
                continue;
            }
            let mut sum = S::zero();
            for r in r0..r1 {
                for &b in &bytes[r * d + c0..r * d + c1] {
                    sum += byte_pixel::<S>(b);
                }
            }
            out[i * IMAGE_DIM + j] = sum / S::of(size as f64);
        }
    }
    out
}

fn square_bytes<S: Scalar>(square: &GreyImage<S>) -> Result<Vec<u8>> {
    if square.width != square.height {
        return Err(Error::ShapeMismatch {
            expected: "square image".into(),
            found: format!("{}x{}", square.width, square.height),
        });
    }
    Ok(square.pixels.iter().map(|&p| quantize(p).0).collect())
}

/// Block-mean downsampling with mask bookkeeping.
///
/// `payload_offsets` are absolute byte offsets into the binary the square
/// was built from; offsets that fall into the cropped tail cannot be
/// represented in the image and are ignored.
pub fn downsample<S: Scalar>(
    square: &GreyImage<S>,
    payload_offsets: &[usize],
) -> Result<(GreyImage<S>, DownsampleRecord)> {
    let d = square.width;
    let bytes = square_bytes(square)?;
    let rows = partition(d);
    let pixels = block_means::<S>(&bytes, d, &rows, &rows);

    // block index of every square row/column
    let mut block_of = vec![0usize; d];
    for i in 0..IMAGE_DIM {
        for r in rows[i]..rows[i + 1] {
            block_of[r] = i;
        }
    }
    let mut payload_positions = vec![Vec::new(); IMAGE_DIM * IMAGE_DIM];
    let mut sorted: Vec<usize> = payload_offsets.iter().copied().filter(|&o| o < d * d).collect();
    sorted.sort_unstable();
    sorted.dedup();
    for off in sorted {
        let (r, c) = (off / d, off % d);
        payload_positions[block_of[r] * IMAGE_DIM + block_of[c]].push(off);
    }
    let mask_m1 = payload_positions.iter().map(|p| !p.is_empty()).collect();

    let record = DownsampleRecord {
        square_dim: d,
        tail: Vec::new(),
        row_bounds: rows.clone(),
        col_bounds: rows,
        mask_m1,
        payload_positions,
    };
    Ok((
        GreyImage {
            width: IMAGE_DIM,
            height: IMAGE_DIM,
            pixels,
        },
        record,
    ))
}

/// Square, downsample and keep the record (tail included) for crafting.
pub fn crafting_transform<S: Scalar>(
    bytes: &[u8],
    payload_offsets: &[usize],
) -> Result<(GreyImage<S>, DownsampleRecord)> {
    let (square, tail) = bytes_to_square::<S>(bytes)?;
    let (image, mut record) = downsample(&square, payload_offsets)?;
    record.tail = tail;
    Ok((image, record))
}

/// The inference-time transform: square then block means, no bookkeeping.
pub fn classify_transform<S: Scalar>(bytes: &[u8]) -> Result<GreyImage<S>> {
    if bytes.is_empty() {
        return Err(Error::EmptyBinary);
    }
    let d = square_dim(bytes.len());
    let bounds = partition(d);
    Ok(GreyImage {
        width: IMAGE_DIM,
        height: IMAGE_DIM,
        pixels: block_means(&bytes[..d * d], d, &bounds, &bounds),
    })
}

/// Outcome of writing an adversarial image back into a binary.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub bytes: Vec<u8>,
    /// Payload bytes whose target value fell outside `[0, 255]`.
    pub clamped_bytes: usize,
    /// Groups rewritten because their target pixel moved.
    pub groups_updated: usize,
}

/// Distributes each moved pixel's target mean over its group's payload bytes.
///
/// For a group `G` with `k >= 1` payload bytes and target `p*`, every payload
/// byte takes the shared value `(p* |G| - fixed) / k`, where `fixed` sums
/// the group's non-payload pixels; the group mean then equals `p*` up to
/// quantization. Groups whose pixel equals the forward image are copied.
pub fn upsample_apply<S: Scalar>(
    record: &DownsampleRecord,
    adversarial: &GreyImage<S>,
    original: &[u8],
) -> Result<Reconstruction> {
    record.check_len(original)?;
    if adversarial.width != IMAGE_DIM || adversarial.height != IMAGE_DIM {
        return Err(Error::ShapeMismatch {
            expected: format!("{IMAGE_DIM}x{IMAGE_DIM} image"),
            found: format!("{}x{}", adversarial.width, adversarial.height),
        });
    }
    let forward = block_means::<S>(
        original,
        record.square_dim,
        &record.row_bounds,
        &record.col_bounds,
    );
    let mut bytes = original.to_vec();
    let mut clamped_bytes = 0;
    let mut groups_updated = 0;
    for idx in 0..IMAGE_DIM * IMAGE_DIM {
        let target = adversarial.pixels[idx];
        if target == forward[idx] {
            continue;
        }
        let (i, j) = (idx / IMAGE_DIM, idx % IMAGE_DIM);
        if !record.mask_m1[idx] {
            return Err(Error::MaskViolation { row: i, col: j });
        }
        let editable = &record.payload_positions[idx];
        let size = S::of(record.group_size(i, j) as f64);
        let f_adv = target * size - record.fixed_sum::<S>(original, i, j);
        let (value, clamped) = quantize(f_adv / S::of(editable.len() as f64));
        if clamped {
            clamped_bytes += editable.len();
        }
        for &off in editable {
            bytes[off] = value;
        }
        groups_updated += 1;
    }
    Ok(Reconstruction {
        bytes,
        clamped_bytes,
        groups_updated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_examples() {
        let (img, tail) = bytes_to_square::<f64>(&[0, 255, 255, 255]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0, 1.0, 1.0]);
        assert!(tail.is_empty());
        let (img, tail) = bytes_to_square::<f64>(&[7; 10]).unwrap();
        assert_eq!((img.width(), tail.len()), (3, 1));
        let (img, tail) = bytes_to_square::<f64>(&vec![1; 10_000]).unwrap();
        assert_eq!((img.width(), tail.len()), (100, 0));
        assert!(matches!(bytes_to_square::<f64>(&[]), Err(Error::EmptyBinary)));
    }

    #[test]
    fn square_dim_is_exact_floor() {
        for n in [1usize, 2, 3, 4, 99, 100, 101, 9_999, 10_000, 10_001, 1 << 40] {
            let d = square_dim(n);
            assert!(d * d <= n && (d + 1) * (d + 1) > n, "n = {n}");
        }
    }

    #[test]
    fn identity_at_100() {
        let bytes: Vec<u8> = (0..10_000).map(|i| (i * 37 % 256) as u8).collect();
        let (sq, _) = bytes_to_square::<f64>(&bytes).unwrap();
        let (img, rec) = downsample(&sq, &[]).unwrap();
        assert_eq!(img.pixels(), sq.pixels());
        assert!((0..100).all(|i| rec.group_size(i, i) == 1));
    }

    #[test]
    fn uniform_200() {
        let (sq, _) = bytes_to_square::<f64>(&vec![51; 40_000]).unwrap();
        let (img, rec) = downsample(&sq, &[]).unwrap();
        assert!(img.pixels().iter().all(|&p| (p - 0.2).abs() < 1e-12));
        assert!((0..100).all(|i| rec.group_size(i, 99 - i) == 4));
    }

    /// Independent block oracle: assign each square row to the output row
    /// whose half-open interval [i*D/100, (i+1)*D/100) contains it, by
    /// direct search over real-valued bounds.
    fn oracle_block(d: usize, r: usize) -> usize {
        (0..100)
            .find(|&i| {
                let lo = (i * d) as f64 / 100.0;
                let hi = ((i + 1) * d) as f64 / 100.0;
                r as f64 >= lo.floor() && (r as f64) < hi.floor()
            })
            .unwrap()
    }

    #[test]
    fn partition_150() {
        let bounds = partition(150);
        assert_eq!(&bounds[..5], &[0, 1, 3, 4, 6]);
        for r in 0..150 {
            let i = oracle_block(150, r);
            assert!(bounds[i] <= r && r < bounds[i + 1]);
        }
        let sizes: std::collections::BTreeSet<usize> = bounds.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(sizes.into_iter().collect::<Vec<_>>(), vec![1, 2]);

        // block (1,1) spans rows 1..3 and cols 1..3: fill it with [[0,1],[1,1]]
        let mut bytes = vec![0u8; 150 * 150];
        bytes[150 + 2] = 255;
        bytes[2 * 150 + 1] = 255;
        bytes[2 * 150 + 2] = 255;
        let (sq, _) = bytes_to_square::<f64>(&bytes).unwrap();
        let (img, _) = downsample(&sq, &[]).unwrap();
        assert!((img.get(1, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn small_binaries_are_padded() {
        let (sq, tail) = bytes_to_square::<f64>(&[255; 30]).unwrap();
        assert_eq!(tail.len(), 5);
        let (img, rec) = downsample(&sq, &[3]).unwrap();
        assert_eq!(img.get(0, 0), 1.0);
        assert_eq!(img.get(4, 4), 1.0);
        assert_eq!(img.get(5, 0), 0.0);
        assert_eq!(rec.group_size(7, 7), 0);
        assert!(rec.mask_m1[3]);
        assert_eq!(rec.editable_pixels(), 1);
    }

    #[test]
    fn group_update_formula() {
        // D = 200, group (0,0) covers offsets {0, 1, 200, 201}; 0 and 1 editable.
        let mut bytes = vec![0u8; 40_000];
        bytes[200] = 255;
        bytes[201] = 0;
        let (mut img, rec) = crafting_transform::<f64>(&bytes, &[0, 1]).unwrap();
        assert!(rec.mask_m1[0]);
        img.pixels_mut()[0] = 0.5;
        let out = upsample_apply(&rec, &img, &bytes).unwrap();
        // (0.5 * 4 - 1.0) / 2 = 0.5 -> round(127.5) = 128
        assert_eq!(&out.bytes[..2], &[128, 128]);
        assert_eq!(out.clamped_bytes, 0);
        assert_eq!(out.groups_updated, 1);

        img.pixels_mut()[0] = 1.0;
        let out = upsample_apply(&rec, &img, &bytes).unwrap();
        assert_eq!(&out.bytes[..2], &[255, 255]);
        assert_eq!(out.clamped_bytes, 2);
    }

    #[test]
    fn mask_violation() {
        let bytes = vec![9u8; 40_000];
        let (mut img, rec) = crafting_transform::<f64>(&bytes, &[0]).unwrap();
        img.pixels_mut()[5] = 0.9;
        assert!(matches!(
            upsample_apply(&rec, &img, &bytes),
            Err(Error::MaskViolation { row: 0, col: 5 })
        ));
    }

    #[test]
    fn reachable_ranges_bound_editable_pixels() {
        let mut bytes = vec![100u8; 40_000];
        bytes[1] = 0x80;
        let (img, rec) = crafting_transform::<f64>(&bytes, &[1]).unwrap();
        let (lo, hi) = rec.reachable_ranges::<f64>(&bytes).unwrap();
        assert!((lo[0] - 300.0 / 255.0 / 4.0).abs() < 1e-12);
        assert!((hi[0] - (300.0 / 255.0 + 1.0) / 4.0).abs() < 1e-12);
        assert_eq!(lo[1], img.pixels()[1]);
        assert_eq!(hi[1], img.pixels()[1]);
    }

    #[test]
    fn pgm_header() {
        let img = GreyImage::<f64>::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(img.to_pgm(), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }

    fn payload_layout() -> impl Strategy<Value = (Vec<u8>, Vec<usize>)> {
        (100usize..260).prop_flat_map(|d| {
            let n = d * d + d / 3;
            (
                proptest::collection::vec(any::<u8>(), n),
                proptest::collection::vec(0..n, 1..40),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn noop_reconstruction_and_locality((bytes, offsets) in payload_layout(), seed in any::<u64>()) {
            let (img, rec) = crafting_transform::<f64>(&bytes, &offsets).unwrap();
            let same = upsample_apply(&rec, &img, &bytes).unwrap();
            prop_assert_eq!(&same.bytes, &bytes);

            // perturb editable pixels within reachable ranges
            let (lo, hi) = rec.reachable_ranges::<f64>(&bytes).unwrap();
            let mut adv = img.clone();
            let mut state = seed | 1;
            for idx in 0..IMAGE_DIM * IMAGE_DIM {
                if rec.mask_m1[idx] {
                    state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                    let t = (state % 1000) as f64 / 999.0;
                    adv.pixels_mut()[idx] = lo[idx] + t * (hi[idx] - lo[idx]);
                }
            }
            let out = upsample_apply(&rec, &adv, &bytes).unwrap();
            prop_assert_eq!(out.clamped_bytes, 0);
            let editable: std::collections::HashSet<usize> = offsets.iter().copied().collect();
            for (i, (a, b)) in out.bytes.iter().zip(&bytes).enumerate() {
                if a != b {
                    prop_assert!(editable.contains(&i));
                }
            }
            // mean fidelity: |mean(G_adv) - p*| <= 0.5 * k / (255 |G|)
            let after = classify_transform::<f64>(&out.bytes).unwrap();
            for idx in 0..IMAGE_DIM * IMAGE_DIM {
                if !rec.mask_m1[idx] || adv.pixels()[idx] == img.pixels()[idx] {
                    continue;
                }
                let (i, j) = (idx / IMAGE_DIM, idx % IMAGE_DIM);
                let k = rec.payload_positions[idx].len() as f64;
                let g = rec.group_size(i, j) as f64;
                let bound = 0.5 * k / (255.0 * g) + 1e-12;
                prop_assert!((after.pixels()[idx] - adv.pixels()[idx]).abs() <= bound);
            }
        }

        #[test]
        fn constant_binary_downsamples_to_constant(v in any::<u8>(), d in 100usize..300) {
            let img = classify_transform::<f64>(&vec![v; d * d]).unwrap();
            let want = f64::from(v) / 255.0;
            prop_assert!(img.pixels().iter().all(|&p| (p - want).abs() < 1e-12));
        }
    }
}
