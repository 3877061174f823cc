//! Spatial alignment of decoded latents: a localization network predicts a
//! projective matrix per view, the matrix is turned into a sampling grid, and
//! the companion latent is resampled onto that grid before the decoders
//! concatenate the two.
//!
//! Normalized coordinate convention: cell centers sit at -1 + (2k+1)/n for
//! k = 0..n-1 (center-aligned). Stated exactly because the two common
//! conventions disagree at borders.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Block, Linear, Nonlinearity, ParamId, ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

/// Perspective divides with |w'| below this are rejected as singular.
pub const DIVISION_GUARD: f64 = 1e-8;

/// Pixel coordinates this close to a lattice point are snapped onto it, so
/// identity transforms reproduce their input exactly despite the normalized
/// round trip's last-ulp wobble. Far below any displacement training can
/// express, and far above the observed wobble (~1e-13 at width 4096).
const LATTICE_SNAP: f64 = 1e-9;

/// 3x3 projective map acting on normalized coordinates. The bottom-right
/// entry is pinned to 1 so the eight free entries are a canonical encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectiveMatrix {
    m: [[f64; 3]; 3],
}

impl ProjectiveMatrix {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projective matrix entries".into()));
        }
        if m[2][2] != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "projective matrix must be normalized with M[2][2] = 1, got {}",
                m[2][2]
            )));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Identity plus eight offsets in row-major order (the pinned ninth
    /// entry never moves). This is the localization network's output coding.
    pub fn from_offsets(o: &[f64]) -> Result<Self> {
        if o.len() != 8 {
            return Err(Error::ShapeMismatch(format!(
                "expected 8 matrix offsets, got {}",
                o.len()
            )));
        }
        let mut m = Self::identity().m;
        for (i, v) in o.iter().enumerate() {
            m[i / 3][i % 3] += v;
        }
        Self::new(m)
    }

    pub fn entries(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    fn rows(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }
}

/// Per-cell source coordinates in normalized space, u horizontal then v
/// vertical, each an h*w plane.
#[derive(Debug, Clone)]
pub struct SamplingGrid {
    pub h: usize,
    pub w: usize,
    pub uv: Vec<f64>,
}

impl SamplingGrid {
    pub fn u(&self, y: usize, x: usize) -> f64 {
        self.uv[y * self.w + x]
    }

    pub fn v(&self, y: usize, x: usize) -> f64 {
        self.uv[self.h * self.w + y * self.w + x]
    }
}

/// Center of cell k out of n in normalized coordinates.
pub fn cell_center(k: usize, n: usize) -> f64 {
    -1.0 + (2 * k + 1) as f64 / n as f64
}

fn pixel_coord(norm: f64, n: usize) -> f64 {
    let raw = (norm * n as f64 + (n as f64 - 1.0)) * 0.5;
    let snapped = raw.round();
    if (raw - snapped).abs() < LATTICE_SNAP {
        snapped
    } else {
        raw
    }
}

/// Homogeneous transform of one cell center; returns (u', v', w') before the
/// perspective divide.
fn project(m: &[f64; 9], u0: f64, v0: f64) -> (f64, f64, f64) {
    (
        m[0] * u0 + m[1] * v0 + m[2],
        m[3] * u0 + m[4] * v0 + m[5],
        m[6] * u0 + m[7] * v0 + m[8],
    )
}

fn grid_from_rows(m: &[f64; 9], h: usize, w: usize) -> Result<SamplingGrid> {
    let mut uv = vec![0.0; 2 * h * w];
    for y in 0..h {
        let v0 = cell_center(y, h);
        for x in 0..w {
            let u0 = cell_center(x, w);
            let (up, vp, wp) = project(m, u0, v0);
            if wp.abs() < DIVISION_GUARD {
                return Err(Error::SingularTransform { row: y, col: x });
            }
            uv[y * w + x] = up / wp;
            uv[h * w + y * w + x] = vp / wp;
        }
    }
    Ok(SamplingGrid { h, w, uv })
}

/// Map every output cell center through M and perspective-divide.
pub fn make_grid(m: &ProjectiveMatrix, h: usize, w: usize) -> Result<SamplingGrid> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("grid extents must be positive".into()));
    }
    grid_from_rows(&m.rows(), h, w)
}

struct Taps {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

fn taps(u: f64, v: f64, h: usize, w: usize) -> Taps {
    let px = pixel_coord(u, w);
    let py = pixel_coord(v, h);
    let (x0, y0) = (px.floor(), py.floor());
    Taps {
        x0: x0 as isize,
        y0: y0 as isize,
        fx: px - x0,
        fy: py - y0,
    }
}

fn corner(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear resampling with zero padding: out-of-range corners contribute
/// nothing, so non-overlapping regions fade to zero instead of smearing the
/// border.
pub fn sample(latent: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    let shape = latent.shape();
    if shape.len() != 3 || shape[1] != grid.h || shape[2] != grid.w {
        return Err(Error::ShapeMismatch(format!(
            "latent {shape:?} does not match grid {}x{}",
            grid.h, grid.w
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = taps(grid.u(y, x), grid.v(y, x), h, w);
            for ch in 0..c {
                let plane = &latent.data()[ch * h * w..(ch + 1) * h * w];
                let top = (1.0 - t.fx) * corner(plane, h, w, t.y0, t.x0)
                    + t.fx * corner(plane, h, w, t.y0, t.x0 + 1);
                let bot = (1.0 - t.fx) * corner(plane, h, w, t.y0 + 1, t.x0)
                    + t.fx * corner(plane, h, w, t.y0 + 1, t.x0 + 1);
                out[(ch * h + y) * w + x] = (1.0 - t.fy) * top + t.fy * bot;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Differentiable version of [`make_grid`]: `offsets` holds the eight free
/// matrix entries as deviations from identity. Output is a 2,h,w grid tensor.
pub fn make_grid_op(tape: &mut Tape, offsets: Var, h: usize, w: usize) -> Result<Var> {
    if tape.shape(offsets) != [8] {
        return Err(Error::ShapeMismatch(format!(
            "matrix offsets must have shape [8], got {:?}",
            tape.shape(offsets)
        )));
    }
    let mut m = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    for (i, v) in tape.value(offsets).data().iter().enumerate() {
        m[i] += v;
    }
    let grid = grid_from_rows(&m, h, w)?;
    let value = Tensor::new(&[2, h, w], grid.uv.clone())?;

    let back = move |g: &Tensor| {
        let mut dm = vec![0.0; 8];
        for y in 0..h {
            let v0 = cell_center(y, h);
            for x in 0..w {
                let u0 = cell_center(x, w);
                let (up, vp, wp) = project(&m, u0, v0);
                let gu = g.data()[y * w + x];
                let gv = g.data()[h * w + y * w + x];
                // d(u'/w')/dm over the first and third rows, and the
                // symmetric v terms. The pinned ninth entry gets no grad.
                let inv = 1.0 / wp;
                let du_dw = -up * inv * inv;
                let dv_dw = -vp * inv * inv;
                dm[0] += gu * u0 * inv;
                dm[1] += gu * v0 * inv;
                dm[2] += gu * inv;
                dm[3] += gv * u0 * inv;
                dm[4] += gv * v0 * inv;
                dm[5] += gv * inv;
                dm[6] += (gu * du_dw + gv * dv_dw) * u0;
                dm[7] += (gu * du_dw + gv * dv_dw) * v0;
            }
        }
        vec![Tensor::new(&[8], dm).expect("offset grad shape")]
    };
    tape.custom(&[offsets], value, back)
}

/// Differentiable version of [`sample`]; gradients flow to both the latent
/// values and the grid coordinates. The interpolant is non-smooth at lattice
/// points, so finite-difference checks must stay off the lattice.
pub fn sample_op(tape: &mut Tape, latent: Var, grid: Var) -> Result<Var> {
    let lshape = tape.shape(latent).to_vec();
    let gshape = tape.shape(grid).to_vec();
    if lshape.len() != 3 || gshape.len() != 3 || gshape[0] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "sample expects latent c,h,w and grid 2,h,w, got {lshape:?} and {gshape:?}"
        )));
    }
    if lshape[1] != gshape[1] || lshape[2] != gshape[2] {
        return Err(Error::ShapeMismatch(format!(
            "latent {lshape:?} does not match grid {gshape:?}"
        )));
    }
    let (c, h, w) = (lshape[0], lshape[1], lshape[2]);
    let sgrid = SamplingGrid {
        h,
        w,
        uv: tape.value(grid).data().to_vec(),
    };
    let lat = tape.value(latent).data().to_vec();
    let value = sample(tape.value(latent), &sgrid)?;

    let back = move |g: &Tensor| {
        let mut dlat = vec![0.0; c * h * w];
        let mut dgrid = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let t = taps(sgrid.u(y, x), sgrid.v(y, x), h, w);
                let wgt = [
                    (1.0 - t.fy) * (1.0 - t.fx),
                    (1.0 - t.fy) * t.fx,
                    t.fy * (1.0 - t.fx),
                    t.fy * t.fx,
                ];
                let cells = [
                    (t.y0, t.x0),
                    (t.y0, t.x0 + 1),
                    (t.y0 + 1, t.x0),
                    (t.y0 + 1, t.x0 + 1),
                ];
                let (mut gu, mut gv) = (0.0, 0.0);
                for ch in 0..c {
                    let go = g.data()[(ch * h + y) * w + x];
                    let plane = &lat[ch * h * w..(ch + 1) * h * w];
                    for (wgt, (cy, cx)) in wgt.iter().zip(cells) {
                        if cy >= 0 && cx >= 0 && cy < h as isize && cx < w as isize {
                            dlat[(ch * h + cy as usize) * w + cx as usize] += go * wgt;
                        }
                    }
                    let c00 = corner(plane, h, w, t.y0, t.x0);
                    let c01 = corner(plane, h, w, t.y0, t.x0 + 1);
                    let c10 = corner(plane, h, w, t.y0 + 1, t.x0);
                    let c11 = corner(plane, h, w, t.y0 + 1, t.x0 + 1);
                    gu += go * ((1.0 - t.fy) * (c01 - c00) + t.fy * (c11 - c10));
                    gv += go * ((1.0 - t.fx) * (c10 - c00) + t.fx * (c11 - c01));
                }
                // Chain through pixel = (norm*n + n - 1)/2.
                dgrid[y * w + x] = gu * 0.5 * w as f64;
                dgrid[h * w + y * w + x] = gv * 0.5 * h as f64;
            }
        }
        vec![
            Tensor::new(&[c, h, w], dlat).expect("latent grad shape"),
            Tensor::new(&[2, h, w], dgrid).expect("grid grad shape"),
        ]
    };
    tape.custom(&[latent, grid], value, back)
}

/// Localization network: one down-stage, spatial mean pooling, two linear
/// layers. The final layer starts at zero so both matrices begin as exact
/// identities, the standard stabilization for spatial transformers.
pub struct Localizer {
    down: Linear,
    act: Nonlinearity,
    fc1: Linear,
    fc2: Linear,
}

impl Localizer {
    /// `channels` is the channel count of the concatenated latent pair; its
    /// spatial extents must be even (the down-stage halves them).
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            down: Linear::new(params, &format!("{name}.down"), 4 * channels, hidden, rng)?,
            act: Nonlinearity::default(),
            fc1: Linear::new(params, &format!("{name}.fc1"), hidden, hidden, rng)?,
            fc2: Linear::zeroed(params, &format!("{name}.fc2"), hidden, 16)?,
        })
    }

    /// Predict the two matrices' offset vectors (shape [8] each) from the
    /// channel-concatenated latents.
    pub fn offsets(&self, tape: &mut Tape, params: &ParamSet, concat: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(concat).to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "localizer expects c,h,w, got {shape:?}"
            )));
        }
        let down = tape.space_to_depth(concat, 2)?;
        let tokens = crate::diffcore::grid_to_tokens(tape, down)?;
        let x = self.down.apply(tape, params, tokens)?;
        let x = self.act.apply(tape, x)?;
        let pooled = tape.col_means(x)?;
        let hidden = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, hidden])?;
        let x = self.fc1.apply(tape, params, pooled)?;
        let x = self.act.apply(tape, x)?;
        let out = self.fc2.apply(tape, params, x)?;
        let flat = tape.reshape(out, &[16])?;
        let m1 = tape.slice_flat(flat, 0, 8)?;
        let m2 = tape.slice_flat(flat, 8, 8)?;
        Ok((m1, m2))
    }

    /// Evaluate both matrices without building gradient state.
    pub fn matrices(
        &self,
        params: &ParamSet,
        concat: &Tensor,
    ) -> Result<(ProjectiveMatrix, ProjectiveMatrix)> {
        let mut tape = Tape::new();
        let input = tape.input(concat.clone());
        let (m1, m2) = self.offsets(&mut tape, params, input)?;
        Ok((
            ProjectiveMatrix::from_offsets(tape.value(m1).data())?,
            ProjectiveMatrix::from_offsets(tape.value(m2).data())?,
        ))
    }
}

impl Block for Localizer {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != 1 {
            return Err(Error::InvalidArgument("localizer takes one input".into()));
        }
        let (m1, m2) = self.offsets(tape, params, inputs[0])?;
        tape.concat_flat(&[m1, m2])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.down.param_ids();
        ids.extend(self.fc1.param_ids());
        ids.extend(self.fc2.param_ids());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::rng::keyed_rng;
    use rand_distr::{Distribution, Normal};

    fn random_latent(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = keyed_rng(seed, &[0xa11]);
        let d = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(&[c, h, w], |_| d.sample(&mut rng))
    }

    #[test]
    fn identity_grid_is_cell_centers() {
        let g = make_grid(&ProjectiveMatrix::identity(), 3, 5).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(g.u(y, x), cell_center(x, 5));
                assert_eq!(g.v(y, x), cell_center(y, 3));
            }
        }
    }

    #[test]
    fn scaling_matrix_halves_coordinates() {
        let m = ProjectiveMatrix::new([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let g = make_grid(&m, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(g.u(y, x), 0.5 * cell_center(x, 4));
                assert_eq!(g.v(y, x), 0.5 * cell_center(y, 4));
            }
        }
    }

    #[test]
    fn degenerate_third_row_is_rejected() {
        // The pinned normalization makes an all-zero third row unconstructible.
        let err = ProjectiveMatrix::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        assert!(err.is_err());
    }

    #[test]
    fn vanishing_perspective_divide_is_singular() {
        // w' = 1 + m20*u0 hits zero at the leftmost column (u0 = -3/4).
        let m = ProjectiveMatrix::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [4.0 / 3.0, 0.0, 1.0]])
            .unwrap();
        match make_grid(&m, 4, 4) {
            Err(Error::SingularTransform { row: 0, col: 0 }) => {}
            other => panic!("expected singular transform at (0,0), got {other:?}"),
        }
    }

    #[test]
    fn identity_sampling_reproduces_input() {
        for (h, w) in [(4, 8), (6, 10), (7, 9), (16, 16)] {
            let latent = random_latent(1, 3, h, w);
            let g = make_grid(&ProjectiveMatrix::identity(), h, w).unwrap();
            let out = sample(&latent, &g).unwrap();
            assert_eq!(out.data(), latent.data(), "{h}x{w}");
        }
    }

    #[test]
    fn unit_cell_translation_shifts_with_zero_border() {
        let (h, w) = (4, 6);
        let latent = random_latent(2, 1, h, w);
        // One cell to the right in source space: offset u by 2/w.
        let m = ProjectiveMatrix::new([
            [1.0, 0.0, 2.0 / w as f64],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        .unwrap();
        let out = sample(&latent, &make_grid(&m, h, w).unwrap()).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = if x + 1 < w {
                    latent.data()[y * w + x + 1]
                } else {
                    0.0
                };
                assert_eq!(out.data()[y * w + x], expect, "({y},{x})");
            }
        }
    }

    #[test]
    fn out_of_range_grid_yields_zero() {
        let latent = random_latent(3, 2, 4, 4);
        let g = SamplingGrid {
            h: 4,
            w: 4,
            uv: vec![5.0; 32],
        };
        let out = sample(&latent, &g).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn integer_translations_compose_in_the_interior() {
        let (h, w) = (6, 6);
        let latent = random_latent(4, 1, h, w);
        let shift = |du: f64, dv: f64| {
            ProjectiveMatrix::new([[1.0, 0.0, du], [0.0, 1.0, dv], [0.0, 0.0, 1.0]]).unwrap()
        };
        let (t1, t2) = (2.0 / w as f64, 2.0 / h as f64);
        let once = sample(
            &latent,
            &make_grid(&shift(t1, t2), h, w).unwrap(),
        )
        .unwrap();
        let first = sample(&latent, &make_grid(&shift(t1, 0.0), h, w).unwrap()).unwrap();
        let twice = sample(&first, &make_grid(&shift(0.0, t2), h, w).unwrap()).unwrap();
        // Interior only: borders see zeros arrive in a different order.
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                assert_eq!(once.data()[y * w + x], twice.data()[y * w + x]);
            }
        }
    }

    #[test]
    fn localizer_starts_at_identity() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(0, &[0x10c]);
        let loc = Localizer::new(&mut params, "loc", 4, 16, &mut rng).unwrap();
        for seed in [5, 6] {
            let concat = random_latent(seed, 4, 4, 8);
            let (m1, m2) = loc.matrices(&params, &concat).unwrap();
            assert_eq!(m1, ProjectiveMatrix::identity());
            assert_eq!(m2, ProjectiveMatrix::identity());
        }
    }

    #[test]
    fn localizer_is_a_pure_per_pair_function() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(1, &[0x10c]);
        let loc = Localizer::new(&mut params, "loc", 2, 8, &mut rng).unwrap();
        // Give the zero-initialized head something to say.
        let id = loc.param_ids()[4];
        for v in params.value_mut(id).data_mut() {
            *v = 0.01;
        }
        let a = random_latent(7, 2, 4, 4);
        let b = random_latent(8, 2, 4, 4);
        let first = loc.matrices(&params, &a).unwrap();
        let _other = loc.matrices(&params, &b).unwrap();
        let again = loc.matrices(&params, &a).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn localizer_gradients_match_finite_differences() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(2, &[0x10c]);
        let loc = Localizer::new(&mut params, "loc", 2, 8, &mut rng).unwrap();
        let id = loc.param_ids()[4];
        {
            let mut r = keyed_rng(3, &[0x10c]);
            let d = Normal::new(0.0, 0.05).unwrap();
            for v in params.value_mut(id).data_mut() {
                *v = d.sample(&mut r);
            }
        }
        for seed in 0..3 {
            let inputs = vec![random_latent(seed, 2, 4, 4)];
            let err = grad_check(&loc, &mut params, &inputs, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: err {err}");
        }
    }

    struct WarpBlock {
        h: usize,
        w: usize,
    }

    impl Block for WarpBlock {
        fn forward(&self, tape: &mut Tape, _params: &ParamSet, inputs: &[Var]) -> Result<Var> {
            let grid = make_grid_op(tape, inputs[1], self.h, self.w)?;
            sample_op(tape, inputs[0], grid)
        }
        fn param_ids(&self) -> Vec<ParamId> {
            vec![]
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences_off_lattice() {
        let (h, w) = (4, 6);
        let block = WarpBlock { h, w };
        let mut params = ParamSet::new();
        for seed in 0..4u64 {
            let latent = random_latent(seed, 2, h, w);
            // Small non-axis offsets keep every tap strictly off the lattice.
            let mut rng = keyed_rng(seed, &[0x0ff]);
            let d = Normal::new(0.0, 0.03).unwrap();
            let offsets = Tensor::from_fn(&[8], |_| d.sample(&mut rng) + 0.013);
            let err = grad_check(&block, &mut params, &[latent, offsets], 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: err {err}");
        }
    }

    #[test]
    fn grid_op_matches_plain_grid() {
        let mut tape = Tape::new();
        let offsets = Tensor::new(&[8], vec![0.02, -0.01, 0.1, 0.03, -0.05, 0.0, 0.01, -0.02])
            .unwrap();
        let m = ProjectiveMatrix::from_offsets(offsets.data()).unwrap();
        let v = tape.input(offsets);
        let g_op = make_grid_op(&mut tape, v, 3, 4).unwrap();
        let g = make_grid(&m, 3, 4).unwrap();
        assert_eq!(tape.value(g_op).data(), &g.uv[..]);
    }

    #[test]
    fn sample_op_matches_plain_sample() {
        let latent = random_latent(9, 2, 4, 4);
        let m = ProjectiveMatrix::from_offsets(&[0.05, 0.0, -0.07, 0.0, 0.02, 0.11, 0.0, 0.0])
            .unwrap();
        let g = make_grid(&m, 4, 4).unwrap();
        let plain = sample(&latent, &g).unwrap();
        let mut tape = Tape::new();
        let l = tape.input(latent);
        let gv = tape.input(Tensor::new(&[2, 4, 4], g.uv.clone()).unwrap());
        let out = sample_op(&mut tape, l, gv).unwrap();
        assert_eq!(tape.value(out).data(), plain.data());
    }
}
