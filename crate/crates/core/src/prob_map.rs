//! World-coordinate grids and per-frame probability maps.
//!
//! A frame is encoded by dropping one bivariate Gaussian on every
//! pedestrian, normalized so its peak value is exactly 1 at the mean (the
//! density's scale factor is deliberately discarded: a map is a field of
//! per-cell presence scores in [0,1], not a distribution that sums to 1),
//! and merging the per-pedestrian maps with a cellwise max. The target
//! pedestrian is marked by a tighter spread than everyone else, which is
//! how a single-channel map tells the network whom to predict.
//!
//! Decoding goes the other way: treat the map as unnormalized cell
//! weights, pick a cell (argmax or proportional sampling), and return its
//! center, jittered uniformly within the cell when sampling so repeated
//! draws explore below the grid resolution.

use crate::tensor::{cast, Scalar, Tensor};
use crate::trajectory::PedestrianId;
use crate::{Error, Result, WorldPoint};
use alloc::format;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use rand::Rng;

/// Geometry of a map: a `width`×`height` grid of square cells anchored in
/// world coordinates. `origin` is the lower corner (minimum x and y);
/// column `c` spans `x ∈ [origin.x + c·cell, origin.x + (c+1)·cell)` and
/// row `r` spans y likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    width: usize,
    height: usize,
    origin: WorldPoint,
    cell_size: f64,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, origin: WorldPoint, cell_size: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument {
                context: "GridSpec::new",
                message: format!("grid must be non-empty, got {width}x{height}"),
            });
        }
        if !(cell_size > 0.0 && cell_size.is_finite() && origin.is_finite()) {
            return Err(Error::Argument {
                context: "GridSpec::new",
                message: format!("bad geometry: cell_size {cell_size}, origin {origin:?}"),
            });
        }
        Ok(Self {
            width,
            height,
            origin,
            cell_size,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn origin(&self) -> WorldPoint {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn world_width(&self) -> f64 {
        self.width as f64 * self.cell_size
    }

    pub fn world_height(&self) -> f64 {
        self.height as f64 * self.cell_size
    }

    pub fn center(&self) -> WorldPoint {
        WorldPoint::new(
            self.origin.x + self.world_width() / 2.0,
            self.origin.y + self.world_height() / 2.0,
        )
    }

    /// Continuous grid coordinates `(gx, gy)` of a world point: cell
    /// indices with sub-cell fraction, so `gx ∈ [0, width)` is in bounds.
    pub fn world_to_grid(&self, p: WorldPoint) -> (f64, f64) {
        (
            (p.x - self.origin.x) / self.cell_size,
            (p.y - self.origin.y) / self.cell_size,
        )
    }

    /// Cell `(row, col)` containing a world point, if inside the grid.
    pub fn cell_of(&self, p: WorldPoint) -> Option<(usize, usize)> {
        let (gx, gy) = self.world_to_grid(p);
        if gx >= 0.0 && gx < self.width as f64 && gy >= 0.0 && gy < self.height as f64 {
            Some((gy as usize, gx as usize))
        } else {
            None
        }
    }

    /// World position of a cell's center.
    pub fn cell_center(&self, row: usize, col: usize) -> WorldPoint {
        WorldPoint::new(
            self.origin.x + (col as f64 + 0.5) * self.cell_size,
            self.origin.y + (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn contains(&self, p: WorldPoint) -> bool {
        self.cell_of(p).is_some()
    }
}

/// Fits a grid around a point cloud: the axis-aligned bounding box is
/// expanded by `margin_frac` of its own extent on each side, the square
/// cell size is chosen so the larger expanded extent fits the larger grid
/// dimension (identical in both axes, keeping Gaussians isotropic on the
/// grid), and the grid is centered on the box. A degenerate cloud (zero
/// extent both ways) gets a 1 m box so a lone point still grids sensibly.
pub fn fit_grid(
    points: &[WorldPoint],
    width: usize,
    height: usize,
    margin_frac: f64,
) -> Result<GridSpec> {
    if points.is_empty() {
        return Err(Error::Argument {
            context: "fit_grid",
            message: "cannot fit a grid around zero points".into(),
        });
    }
    if !(margin_frac >= 0.0 && margin_frac.is_finite()) {
        return Err(Error::Argument {
            context: "fit_grid",
            message: format!("margin_frac must be non-negative, got {margin_frac}"),
        });
    }
    let mut lo = WorldPoint::new(f64::INFINITY, f64::INFINITY);
    let mut hi = WorldPoint::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        if !p.is_finite() {
            return Err(Error::Argument {
                context: "fit_grid",
                message: format!("non-finite point {p:?}"),
            });
        }
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    let expand = 1.0 + 2.0 * margin_frac;
    let mut ext_x = (hi.x - lo.x) * expand;
    let mut ext_y = (hi.y - lo.y) * expand;
    if ext_x == 0.0 && ext_y == 0.0 {
        ext_x = 1.0;
        ext_y = 1.0;
    }
    let cell = ext_x.max(ext_y) / width.max(height) as f64;
    let center = WorldPoint::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0);
    let origin = WorldPoint::new(
        center.x - width as f64 * cell / 2.0,
        center.y - height as f64 * cell / 2.0,
    );
    GridSpec::new(width, height, origin, cell)
}

/// A bivariate Gaussian in world coordinates, peak-normalized when
/// rendered. Construction validates the spread, so a value of this type
/// always renders to a well-formed map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    mu1: f64,
    mu2: f64,
    sigma1: f64,
    sigma2: f64,
    rho: f64,
}

impl GaussianParams {
    pub fn new(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64, rho: f64) -> Result<Self> {
        let finite =
            mu1.is_finite() && mu2.is_finite() && sigma1.is_finite() && sigma2.is_finite();
        if !finite || sigma1 <= 0.0 || sigma2 <= 0.0 || !(rho.abs() < 1.0) {
            return Err(Error::Argument {
                context: "GaussianParams::new",
                message: format!(
                    "need finite mu, positive sigma, |rho| < 1; \
                     got mu ({mu1}, {mu2}), sigma ({sigma1}, {sigma2}), rho {rho}"
                ),
            });
        }
        Ok(Self {
            mu1,
            mu2,
            sigma1,
            sigma2,
            rho,
        })
    }

    /// Circular Gaussian centered on a world point.
    pub fn isotropic(center: WorldPoint, sigma: f64) -> Result<Self> {
        Self::new(center.x, center.y, sigma, sigma, 0.0)
    }

    pub fn mean(&self) -> WorldPoint {
        WorldPoint::new(self.mu1, self.mu2)
    }

    pub fn sigmas(&self) -> (f64, f64) {
        (self.sigma1, self.sigma2)
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Peak-normalized density at a world point: exactly 1 at the mean,
    /// falling off as exp(-q/2) with the Mahalanobis form q.
    pub fn peak_normalized_at(&self, p: WorldPoint) -> f64 {
        let dx = (p.x - self.mu1) / self.sigma1;
        let dy = (p.y - self.mu2) / self.sigma2;
        let q = if self.rho == 0.0 {
            dx * dx + dy * dy
        } else {
            (dx * dx - 2.0 * self.rho * dx * dy + dy * dy) / (1.0 - self.rho * self.rho)
        };
        (-0.5 * q).exp()
    }
}

/// A probability map: per-cell values in `[0, 1]` over a [`GridSpec`],
/// stored as a `1×H×W` tensor so maps feed convolutions directly. Row `r`,
/// column `c` of the map is the cell at grid position `(r, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<T: Scalar> {
    values: Tensor<T>,
    spec: GridSpec,
}

impl<T: Scalar> ProbMap<T> {
    pub fn zero(spec: &GridSpec) -> Self {
        Self {
            values: Tensor::zeros(&[1, spec.height, spec.width]),
            spec: spec.clone(),
        }
    }

    /// Wraps an existing `1×H×W` tensor; dimensions must match the spec.
    pub fn from_tensor(spec: &GridSpec, values: Tensor<T>) -> Result<Self> {
        let (c, h, w) = values.dims3("ProbMap::from_tensor")?;
        if (c, h, w) != (1, spec.height, spec.width) {
            return Err(Error::Shape {
                context: "ProbMap::from_tensor",
                expected: alloc::vec![1, spec.height, spec.width],
                got: alloc::vec![c, h, w],
            });
        }
        Ok(Self {
            values,
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }

    pub fn value(&self, row: usize, col: usize) -> T {
        self.values.data()[row * self.spec.width + col]
    }

    pub fn max_value(&self) -> T {
        self.values
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v))
    }

    /// Errors unless both maps share one grid.
    pub fn check_same_spec(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::Argument {
                context,
                message: "maps use different grids".into(),
            });
        }
        Ok(())
    }

    /// Renders `gaussian` into this map, keeping the cellwise max of the
    /// existing value and the Gaussian. Gaussians are evaluated at cell
    /// centers; a zero-correlation Gaussian uses a separable row/column
    /// factorization (exact, just fewer exp calls).
    pub fn max_gaussian(&mut self, gaussian: &GaussianParams) {
        let (w, h) = (self.spec.width, self.spec.height);
        if gaussian.rho() == 0.0 {
            let col_f: Vec<f64> = (0..w)
                .map(|c| {
                    let x = self.spec.origin.x + (c as f64 + 0.5) * self.spec.cell_size;
                    let d = (x - gaussian.mu1) / gaussian.sigma1;
                    (-0.5 * d * d).exp()
                })
                .collect();
            let row_f: Vec<f64> = (0..h)
                .map(|r| {
                    let y = self.spec.origin.y + (r as f64 + 0.5) * self.spec.cell_size;
                    let d = (y - gaussian.mu2) / gaussian.sigma2;
                    (-0.5 * d * d).exp()
                })
                .collect();
            let data = self.values.data_mut();
            for r in 0..h {
                let rf = row_f[r];
                let row = &mut data[r * w..(r + 1) * w];
                for c in 0..w {
                    let v: T = cast(rf * col_f[c]);
                    if v > row[c] {
                        row[c] = v;
                    }
                }
            }
        } else {
            let data = self.values.data_mut();
            for r in 0..h {
                for c in 0..w {
                    let p = WorldPoint::new(
                        self.spec.origin.x + (c as f64 + 0.5) * self.spec.cell_size,
                        self.spec.origin.y + (r as f64 + 0.5) * self.spec.cell_size,
                    );
                    let v: T = cast(gaussian.peak_normalized_at(p));
                    if v > data[r * w + c] {
                        data[r * w + c] = v;
                    }
                }
            }
        }
    }
}

/// Renders a single Gaussian to a fresh map (cell centers, peak value 1
/// when the mean is at a cell center; the mean may lie outside the grid,
/// leaving only its tail visible).
pub fn gaussian_map<T: Scalar>(gaussian: &GaussianParams, spec: &GridSpec) -> ProbMap<T> {
    let mut map = ProbMap::zero(spec);
    map.max_gaussian(gaussian);
    map
}

/// Cellwise maximum of several maps on one grid. The empty list gives the
/// all-zero map, so composition has an identity.
pub fn compose_max<T: Scalar>(spec: &GridSpec, maps: &[ProbMap<T>]) -> Result<ProbMap<T>> {
    let mut out = ProbMap::zero(spec);
    for m in maps {
        out.check_same_spec(m, "compose_max")?;
        for (dst, &src) in out.values.data_mut().iter_mut().zip(m.values.data()) {
            if src > *dst {
                *dst = src;
            }
        }
    }
    Ok(out)
}

/// Spread and neighbor handling for frame encoding. Defaults follow the
/// trained configuration: 0.1 m for the prediction target, 0.3 m for
/// everyone else, neighbors included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    pub sigma_target: f64,
    pub sigma_other: f64,
    /// When false the map carries only the target (the social-integration
    /// ablation switch).
    pub integrate_neighbors: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            sigma_target: 0.1,
            sigma_other: 0.3,
            integrate_neighbors: true,
        }
    }
}

/// Encodes one frame: a tight Gaussian on the target pedestrian, wider
/// ones on every other listed pedestrian (unless neighbor integration is
/// off), composed with a cellwise max. The target must appear in
/// `positions` exactly once.
pub fn encode_frame<T: Scalar>(
    positions: &[(PedestrianId, WorldPoint)],
    target: PedestrianId,
    spec: &GridSpec,
    opts: &EncodeOptions,
) -> Result<ProbMap<T>> {
    let target_count = positions.iter().filter(|(id, _)| *id == target).count();
    if target_count != 1 {
        return Err(Error::Argument {
            context: "encode_frame",
            message: format!(
                "target pedestrian {target} appears {target_count} times in the frame"
            ),
        });
    }
    let mut map = ProbMap::zero(spec);
    for &(id, pos) in positions {
        let sigma = if id == target {
            opts.sigma_target
        } else if opts.integrate_neighbors {
            opts.sigma_other
        } else {
            continue;
        };
        map.max_gaussian(&GaussianParams::isotropic(pos, sigma)?);
    }
    Ok(map)
}

/// Draws a world coordinate from a map: cells are weighted by value, and
/// the returned point is jittered uniformly within the chosen cell. Fails
/// on maps with no positive mass. Draw order (cell, then x jitter, then y
/// jitter) is fixed so seeded runs are reproducible.
pub fn sample_coordinate<T: Scalar>(map: &ProbMap<T>, rng: &mut impl Rng) -> Result<WorldPoint> {
    let spec = map.spec();
    let mut total = 0.0f64;
    for &v in map.tensor().data() {
        let v = v.to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::Decode {
                message: "map contains non-finite values".into(),
            });
        }
        if v > 0.0 {
            total += v;
        }
    }
    if total <= 0.0 {
        return Err(Error::Decode {
            message: "map has no positive mass to sample from".into(),
        });
    }
    let mut u = rng.gen::<f64>() * total;
    let mut chosen = spec.num_cells() - 1;
    for (i, &v) in map.tensor().data().iter().enumerate() {
        let v = v.to_f64().unwrap();
        if v > 0.0 {
            u -= v;
            if u <= 0.0 {
                chosen = i;
                break;
            }
        }
    }
    let (row, col) = (chosen / spec.width(), chosen % spec.width());
    let center = spec.cell_center(row, col);
    let jx = (rng.gen::<f64>() - 0.5) * spec.cell_size();
    let jy = (rng.gen::<f64>() - 0.5) * spec.cell_size();
    Ok(WorldPoint::new(center.x + jx, center.y + jy))
}

/// Center of the highest-valued cell; ties break to the first cell in
/// row-major order, so the result is deterministic.
pub fn argmax_decode<T: Scalar>(map: &ProbMap<T>) -> WorldPoint {
    let mut best = 0usize;
    let mut best_v = map.tensor().data()[0];
    for (i, &v) in map.tensor().data().iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let (row, col) = (best / map.spec().width(), best % map.spec().width());
    map.spec().cell_center(row, col)
}
