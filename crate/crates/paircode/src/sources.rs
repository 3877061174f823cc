//! Synthetic correlated image pairs and PGM/PPM file handling.
//!
//! A pair stands in for a stereo capture: both views see the same low-pass
//! random field through slightly different rigid warps, plus independent
//! low-pass detail. Generation is a pure function of (config, index), so
//! datasets are never stored, only re-derived.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::Tensor;
use crate::rng::keyed_rng;
use crate::{Error, Result};

const TAG_SHARED: u64 = 0x7368_6172_6564; // "shared"
const TAG_DETAIL: u64 = 0x6465_7461_696c; // "detail"
const TAG_WARP: u64 = 0x7761_7270; // "warp"

/// Two views of one scene. Both tensors are C,H,W with intensities in [0,1].
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub x1: Tensor,
    pub x2: Tensor,
    pub pair_id: u64,
}

impl ImagePair {
    pub fn new(x1: Tensor, x2: Tensor, pair_id: u64) -> Result<Self> {
        if x1.shape() != x2.shape() || x1.shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image pair views must share a C,H,W shape, got {:?} and {:?}",
                x1.shape(),
                x2.shape()
            )));
        }
        for t in [&x1, &x2] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(
                    "image intensities must lie in [0,1]".into(),
                ));
            }
        }
        Ok(Self { x1, x2, pair_id })
    }
}

/// Knobs for the pair generator.
#[derive(Debug, Clone)]
pub struct SourceConfig {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Gain on the warped shared field. Larger values mean more correlated views.
    pub shared_gain: f64,
    /// Gain on the per-view detail field.
    pub detail_gain: f64,
    /// Per-view translation magnitude bound, in pixels.
    pub max_shift: f64,
    /// Per-view rotation magnitude bound, in radians.
    pub max_rotation: f64,
    /// Box filter radius for the low-pass fields.
    pub smoothness: usize,
    pub seed: u64,
}

impl SourceConfig {
    pub fn new(c: usize, h: usize, w: usize, seed: u64) -> Self {
        Self {
            c,
            h,
            w,
            shared_gain: 0.6,
            detail_gain: 0.15,
            max_shift: 1.5,
            max_rotation: 0.03,
            smoothness: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidArgument("image extents must be positive".into()));
        }
        for (name, v) in [
            ("shared_gain", self.shared_gain),
            ("detail_gain", self.detail_gain),
            ("max_shift", self.max_shift),
            ("max_rotation", self.max_rotation),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// White noise put through a separable box filter of the given radius, then
/// rescaled so the interior has standard deviation about 0.25. That keeps
/// unit gains mostly inside [0,1] after the 0.5 offset.
fn low_pass_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, radius: usize) -> Tensor {
    let mut noise = vec![0.0f64; c * h * w];
    for v in &mut noise {
        *v = StandardNormal.sample(rng);
    }
    let k = 2 * radius + 1;
    if k > 1 {
        let r = radius as isize;
        let mut tmp = vec![0.0f64; c * h * w];
        // rows, clamp to edge
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * h + y) * w;
                for x in 0..w {
                    let mut acc = 0.0;
                    for d in -r..=r {
                        let xs = (x as isize + d).clamp(0, w as isize - 1) as usize;
                        acc += noise[row + xs];
                    }
                    tmp[row + x] = acc / k as f64;
                }
            }
        }
        // columns
        for ch in 0..c {
            for x in 0..w {
                for y in 0..h {
                    let mut acc = 0.0;
                    for d in -r..=r {
                        let ys = (y as isize + d).clamp(0, h as isize - 1) as usize;
                        acc += tmp[(ch * h + ys) * w + x];
                    }
                    noise[(ch * h + y) * w + x] = acc / k as f64;
                }
            }
        }
    }
    // Box filtering white noise divides the std by k per axis.
    let scale = 0.25 * k as f64;
    for v in &mut noise {
        *v *= scale;
    }
    Tensor::new(&[c, h, w], noise).expect("field construction is internally consistent")
}

/// Clamped bilinear lookup. Integer coordinates reproduce grid values exactly.
fn sample_clamped(src: &[f64], sh: usize, sw: usize, y: f64, x: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let cl = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let (xi, yi) = (x0 as isize, y0 as isize);
    let (xa, xb) = (cl(xi, sw), cl(xi + 1, sw));
    let (ya, yb) = (cl(yi, sh), cl(yi + 1, sh));
    let top = (1.0 - fx) * src[ya * sw + xa] + fx * src[ya * sw + xb];
    let bot = (1.0 - fx) * src[yb * sw + xa] + fx * src[yb * sw + xb];
    (1.0 - fy) * top + fy * bot
}

/// Generate one pair. Fully determined by (cfg.seed, index); the two views
/// share a low-pass field observed through independent small rigid warps and
/// carry independent detail:
///   x_i = clip(0.5 + shared_gain * W_i(S) + detail_gain * D_i)
pub fn gen_correlated_pair(cfg: &SourceConfig, index: u64) -> Result<ImagePair> {
    cfg.validate()?;
    let half_diag = 0.5 * (cfg.h as f64).hypot(cfg.w as f64);
    let pad = (cfg.max_shift + half_diag * cfg.max_rotation).ceil() as usize + 1;
    let (sh, sw) = (cfg.h + 2 * pad, cfg.w + 2 * pad);
    let shared = {
        let mut rng = keyed_rng(cfg.seed, &[TAG_SHARED, index]);
        low_pass_field(&mut rng, cfg.c, sh, sw, cfg.smoothness)
    };
    let (cy, cx) = ((sh - 1) as f64 / 2.0, (sw - 1) as f64 / 2.0);

    let mut views = Vec::with_capacity(2);
    for view in 1..=2u64 {
        let (theta, dx, dy) = {
            let mut rng = keyed_rng(cfg.seed, &[TAG_WARP, index, view]);
            let th = rng.gen_range(-cfg.max_rotation..=cfg.max_rotation);
            let dx = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
            let dy = rng.gen_range(-cfg.max_shift..=cfg.max_shift);
            (th, dx, dy)
        };
        let detail = {
            let mut rng = keyed_rng(cfg.seed, &[TAG_DETAIL, index, view]);
            low_pass_field(&mut rng, cfg.c, cfg.h, cfg.w, cfg.smoothness)
        };
        let (sin, cos) = theta.sin_cos();
        let mut data = vec![0.0f64; cfg.c * cfg.h * cfg.w];
        for ch in 0..cfg.c {
            let plane = &shared.data()[ch * sh * sw..(ch + 1) * sh * sw];
            for y in 0..cfg.h {
                for x in 0..cfg.w {
                    let px = (x + pad) as f64 - cx;
                    let py = (y + pad) as f64 - cy;
                    let sx = cos * px - sin * py + cx + dx;
                    let sy = sin * px + cos * py + cy + dy;
                    let s = sample_clamped(plane, sh, sw, sy, sx);
                    let d = detail.data()[(ch * cfg.h + y) * cfg.w + x];
                    let v = 0.5 + cfg.shared_gain * s + cfg.detail_gain * d;
                    data[(ch * cfg.h + y) * cfg.w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        views.push(Tensor::new(&[cfg.c, cfg.h, cfg.w], data)?);
    }
    let x2 = views.pop().expect("two views");
    let x1 = views.pop().expect("two views");
    ImagePair::new(x1, x2, index)
}

/// Deterministic train/test split as disjoint index ranges.
pub fn dataset(cfg: &SourceConfig, n_train: usize, n_test: usize) -> Result<(Vec<u64>, Vec<u64>)> {
    cfg.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(
            "train and test splits must be nonempty".into(),
        ));
    }
    let train = (0..n_train as u64).collect();
    let test = (n_train as u64..(n_train + n_test) as u64).collect();
    Ok((train, test))
}

fn parse_error(msg: &str) -> Error {
    Error::Parse(format!("image file: {msg}"))
}

/// Read a binary PGM (P5, one channel) or PPM (P6, three channels) with
/// maxval 255. Intensities map to [0,1] by dividing by 255.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<Vec<u8>> {
        // Skip whitespace and # comments, then take one token.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_error("truncated header"));
        }
        Ok(bytes[start..pos].to_vec())
    };

    let magic = token(&bytes)?;
    let channels = match magic.as_slice() {
        b"P5" => 1usize,
        b"P6" => 3usize,
        _ => return Err(parse_error("magic must be P5 or P6")),
    };
    let mut field = |bytes: &[u8], name: &str| -> Result<usize> {
        let t = token(bytes)?;
        std::str::from_utf8(&t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| parse_error(&format!("bad {name}")))
    };
    let w = field(&bytes, "width")?;
    let h = field(&bytes, "height")?;
    let maxval = field(&bytes, "maxval")?;
    if w == 0 || h == 0 {
        return Err(parse_error("zero image extent"));
    }
    if maxval != 255 {
        return Err(parse_error("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_error("missing payload separator"));
    }
    pos += 1;

    let need = channels * h * w;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(parse_error(&format!(
            "truncated payload: need {need} bytes, have {}",
            payload.len()
        )));
    }
    // Interleaved samples to planar C,H,W.
    let mut data = vec![0.0f64; need];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                let b = payload[(y * w + x) * channels + ch];
                data[(ch * h + y) * w + x] = b as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[channels, h, w], data)
}

/// Write a C,H,W tensor as PGM (C=1) or PPM (C=3), quantizing with
/// round-half-up so a write/read round trip errs by at most 1/510.
pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "write_image expects C,H,W, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::InvalidArgument(format!(
                "only 1- or 3-channel images can be written, got {c}"
            )))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = t.data()[(ch * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0 + 0.5).floor() as u8);
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write both views as `pair_<index>_1` and `pair_<index>_2` with the
/// extension picked by channel count. Returns the two paths.
pub fn write_pair(dir: &Path, pair: &ImagePair) -> Result<(PathBuf, PathBuf)> {
    let ext = if pair.x1.shape()[0] == 3 { "ppm" } else { "pgm" };
    let p1 = dir.join(format!("pair_{}_1.{ext}", pair.pair_id));
    let p2 = dir.join(format!("pair_{}_2.{ext}", pair.pair_id));
    write_image(&pair.x1, &p1)?;
    write_image(&pair.x2, &p2)?;
    Ok((p1, p2))
}
