//! Two-dimensional stochastic road surfaces.
//!
//! Roughness is synthesised spectrally: every wavevector gets an amplitude
//! from the power-law density `S0 * (n0 / sqrt(nX² + nY² + eps))^omega` and a
//! uniformly random phase, the spectrum is made Hermitian, and an inverse 2-D
//! FFT yields a real elevation grid. Deterministic hills can be superimposed
//! and the surface is queried through a C¹ bicubic Hermite interpolant.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CcdError, Result};
use crate::seed;

const SURFACE_MAGIC: &[u8; 8] = b"CCDROAD\0";
const SURFACE_VERSION: u32 = 1;

/// Global amplitude scale applied on top of `sqrt(PSD * dn²)`. Fixed once so
/// the default configuration yields a 0.045 m elevation standard deviation.
pub const DEFAULT_CALIBRATION: f64 = 14.4936;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    /// Reference density (m³).
    pub s0: f64,
    /// Reference spatial frequency (cycles/m).
    pub n0: f64,
    /// Waviness exponent.
    pub omega: f64,
    /// Regulariser inside the square root.
    pub epsilon: f64,
    pub seed: u64,
    pub calibration: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { s0: 1e-4, n0: 0.1, omega: 2.5, epsilon: 0.005, seed: 0, calibration: DEFAULT_CALIBRATION }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s0", self.s0), ("n0", self.n0), ("omega", self.omega), ("epsilon", self.epsilon), ("calibration", self.calibration)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CcdError::invalid(format!("spectral.{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn psd(&self, n_x: f64, n_y: f64) -> f64 {
        self.s0 * (self.n0 / (n_x * n_x + n_y * n_y + self.epsilon).sqrt()).powf(self.omega)
    }
}

/// Half-sine bump across the whole width of the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HillConfig {
    pub amplitude: f64,
    pub x0: f64,
    pub length: f64,
}

impl Default for HillConfig {
    fn default() -> Self {
        Self { amplitude: 0.05, x0: 1000.0, length: 400.0 }
    }
}

impl HillConfig {
    /// Hill height at longitudinal position `x`; zero outside `[x0, x0 + length]`.
    pub fn height(&self, x: f64) -> f64 {
        if x < self.x0 || x > self.x0 + self.length {
            0.0
        } else {
            self.amplitude * (PI * (x - self.x0) / self.length).sin()
        }
    }
}

/// Gridded elevation `Z(X, Y)` with precomputed slope grids.
///
/// Storage is row-major in Y: node `(i, j)` at `(origin.0 + i*spacing,
/// origin.1 + j*spacing)` lives at `j * nx + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadSurface {
    nx: usize,
    ny: usize,
    spacing: f64,
    origin: (f64, f64),
    z: Vec<f64>,
    dz_dx: Vec<f64>,
    dz_dy: Vec<f64>,
    calibration: f64,
    seed: u64,
}

/// Elevation and slopes at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElevationSample {
    pub z: f64,
    pub dz_dx: f64,
    pub dz_dy: f64,
}

fn fft_freq(k: usize, n: usize, spacing: f64) -> f64 {
    let signed = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    signed / (n as f64 * spacing)
}

/// Inverse 2-D FFT in place (unnormalised), rows then columns.
fn ifft2(data: &mut [Complex64], nx: usize, ny: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let row = planner.plan_fft_inverse(nx);
    for chunk in data.chunks_exact_mut(nx) {
        row.process(chunk);
    }
    let col = planner.plan_fft_inverse(ny);
    let mut buf = vec![Complex64::new(0.0, 0.0); ny];
    for i in 0..nx {
        for j in 0..ny {
            buf[j] = data[j * nx + i];
        }
        col.process(&mut buf);
        for j in 0..ny {
            data[j * nx + i] = buf[j];
        }
    }
}

/// Synthesise a surface over `extent = (width, height)` metres.
///
/// Returns the surface and the largest imaginary magnitude left after the
/// inverse transform (zero up to round-off because of Hermitian symmetry).
pub fn generate_surface_with_residual(cfg: &SpectralConfig, extent: (f64, f64), resolution: f64) -> Result<(RoadSurface, f64)> {
    cfg.validate()?;
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(CcdError::invalid(format!("resolution must be positive, got {resolution}")));
    }
    let dims = [extent.0 / resolution, extent.1 / resolution];
    for d in dims {
        if !(d >= 4.0) || (d - d.round()).abs() > 1e-9 {
            return Err(CcdError::invalid(format!("extent {extent:?} / resolution {resolution} must give integer dimensions >= 4")));
        }
    }
    let (nx, ny) = (dims[0].round() as usize, dims[1].round() as usize);
    let dnx = 1.0 / (nx as f64 * resolution);
    let dny = 1.0 / (ny as f64 * resolution);

    let mut rng = seed::rng(cfg.seed, "surface");
    let mut spec = vec![Complex64::new(0.0, 0.0); nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let lin = j * nx + i;
            let (pi, pj) = ((nx - i) % nx, (ny - j) % ny);
            let partner = pj * nx + pi;
            if lin > partner {
                continue;
            }
            let phase: f64 = rng.random::<f64>() * 2.0 * PI;
            if lin == 0 {
                continue;
            }
            let amp = cfg.calibration * (cfg.psd(fft_freq(i, nx, resolution), fft_freq(j, ny, resolution)) * dnx * dny).sqrt();
            if lin == partner {
                // self-conjugate bins (Nyquist lines) must be real
                spec[lin] = Complex64::new(amp * phase.cos(), 0.0);
            } else {
                let c = Complex64::from_polar(amp, phase);
                spec[lin] = c;
                spec[partner] = c.conj();
            }
        }
    }
    ifft2(&mut spec, nx, ny);
    let residual = spec.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    let z: Vec<f64> = spec.iter().map(|c| c.re).collect();
    let surface = RoadSurface::from_grid(nx, ny, resolution, (0.0, 0.0), z, cfg.calibration, cfg.seed)?;
    Ok((surface, residual))
}

pub fn generate_surface(cfg: &SpectralConfig, extent: (f64, f64), resolution: f64) -> Result<RoadSurface> {
    generate_surface_with_residual(cfg, extent, resolution).map(|(s, _)| s)
}

fn hermite(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    // h00, h10, h01, h11 and their t-derivatives
    (
        [2.0 * t3 - 3.0 * t2 + 1.0, t3 - 2.0 * t2 + t, -2.0 * t3 + 3.0 * t2, t3 - t2],
        [6.0 * t2 - 6.0 * t, 3.0 * t2 - 4.0 * t + 1.0, -6.0 * t2 + 6.0 * t, 3.0 * t2 - 2.0 * t],
    )
}

impl RoadSurface {
    /// Wrap an existing grid; slope grids are computed from it.
    pub fn from_grid(nx: usize, ny: usize, spacing: f64, origin: (f64, f64), z: Vec<f64>, calibration: f64, seed: u64) -> Result<Self> {
        if nx < 2 || ny < 2 || z.len() != nx * ny {
            return Err(CcdError::Shape(format!("grid {nx}x{ny} with {} values", z.len())));
        }
        if !(spacing > 0.0) {
            return Err(CcdError::invalid("grid spacing must be positive"));
        }
        let mut s = Self { nx, ny, spacing, origin, z, dz_dx: Vec::new(), dz_dy: Vec::new(), calibration, seed };
        s.refresh_gradients();
        Ok(s)
    }

    /// A flat surface; handy for tests and straight-road runs.
    pub fn flat(nx: usize, ny: usize, spacing: f64) -> Result<Self> {
        Self::from_grid(nx, ny, spacing, (0.0, 0.0), vec![0.0; nx * ny], 1.0, 0)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn calibration(&self) -> f64 {
        self.calibration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn elevations(&self) -> &[f64] {
        &self.z
    }

    pub fn node(&self, i: usize, j: usize) -> f64 {
        self.z[j * self.nx + i]
    }

    /// Upper corner of the queryable rectangle.
    pub fn extent_max(&self) -> (f64, f64) {
        (self.origin.0 + (self.nx - 1) as f64 * self.spacing, self.origin.1 + (self.ny - 1) as f64 * self.spacing)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (xm, ym) = self.extent_max();
        x >= self.origin.0 && x <= xm && y >= self.origin.1 && y <= ym
    }

    fn refresh_gradients(&mut self) {
        let (nx, ny, h) = (self.nx, self.ny, self.spacing);
        let z = &self.z;
        let diff = |a: f64, b: f64, span: f64| (a - b) / span;
        self.dz_dx = (0..ny * nx)
            .map(|k| {
                let (i, j) = (k % nx, k / nx);
                let at = |ii: usize| z[j * nx + ii];
                if i == 0 {
                    diff(at(1), at(0), h)
                } else if i == nx - 1 {
                    diff(at(nx - 1), at(nx - 2), h)
                } else {
                    diff(at(i + 1), at(i - 1), 2.0 * h)
                }
            })
            .collect();
        self.dz_dy = (0..ny * nx)
            .map(|k| {
                let (i, j) = (k % nx, k / nx);
                let at = |jj: usize| z[jj * nx + i];
                if j == 0 {
                    diff(at(1), at(0), h)
                } else if j == ny - 1 {
                    diff(at(ny - 1), at(ny - 2), h)
                } else {
                    diff(at(j + 1), at(j - 1), 2.0 * h)
                }
            })
            .collect();
    }

    /// Mixed derivative from the x-slope grid.
    fn dxy(&self, i: usize, j: usize) -> f64 {
        let (nx, ny, h) = (self.nx, self.ny, self.spacing);
        let at = |jj: usize| self.dz_dx[jj * nx + i];
        if j == 0 {
            (at(1) - at(0)) / h
        } else if j == ny - 1 {
            (at(ny - 1) - at(ny - 2)) / h
        } else {
            (at(j + 1) - at(j - 1)) / (2.0 * h)
        }
    }

    /// Superimpose a hill along X; returns the modified surface.
    pub fn add_hill(mut self, hill: &HillConfig) -> Result<Self> {
        let (xm, _) = self.extent_max();
        if !(hill.length > 0.0) || hill.x0 < self.origin.0 || hill.x0 + hill.length > xm {
            return Err(CcdError::invalid(format!(
                "hill [{}, {}] does not fit in the surface X range [{}, {}]",
                hill.x0,
                hill.x0 + hill.length,
                self.origin.0,
                xm
            )));
        }
        for j in 0..self.ny {
            for i in 0..self.nx {
                let x = self.origin.0 + i as f64 * self.spacing;
                self.z[j * self.nx + i] += hill.height(x);
            }
        }
        self.refresh_gradients();
        Ok(self)
    }

    /// Bicubic Hermite interpolation of elevation and its analytic slopes.
    pub fn sample(&self, x: f64, y: f64) -> Result<ElevationSample> {
        if !x.is_finite() || !y.is_finite() || !self.contains(x, y) {
            return Err(CcdError::OutOfMap { x, y });
        }
        let h = self.spacing;
        let fx = (x - self.origin.0) / h;
        let fy = (y - self.origin.1) / h;
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        let t = fx - i as f64;
        let u = fy - j as f64;
        let (ht, dht) = hermite(t);
        let (hu, dhu) = hermite(u);

        let mut z = 0.0;
        let mut zt = 0.0;
        let mut zu = 0.0;
        for (ca, cb) in [(0usize, 0usize), (1, 0), (0, 1), (1, 1)] {
            let (ii, jj) = (i + ca, j + cb);
            let k = jj * self.nx + ii;
            // value basis uses h00/h01, derivative basis h10/h11
            let (v_t, d_t, dv_t, dd_t) = (ht[2 * ca], ht[1 + 2 * ca], dht[2 * ca], dht[1 + 2 * ca]);
            let (v_u, d_u, dv_u, dd_u) = (hu[2 * cb], hu[1 + 2 * cb], dhu[2 * cb], dhu[1 + 2 * cb]);
            let f = self.z[k];
            let gx = self.dz_dx[k] * h;
            let gy = self.dz_dy[k] * h;
            let gxy = self.dxy(ii, jj) * h * h;
            z += f * v_t * v_u + gx * d_t * v_u + gy * v_t * d_u + gxy * d_t * d_u;
            zt += f * dv_t * v_u + gx * dd_t * v_u + gy * dv_t * d_u + gxy * dd_t * d_u;
            zu += f * v_t * dv_u + gx * d_t * dv_u + gy * v_t * dd_u + gxy * d_t * dd_u;
        }
        Ok(ElevationSample { z, dz_dx: zt / h, dz_dy: zu / h })
    }

    pub fn mean(&self) -> f64 {
        self.z.iter().sum::<f64>() / self.z.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.z.len() as f64).sqrt()
    }

    pub fn peak_to_peak(&self) -> f64 {
        let (lo, hi) = self.z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        hi - lo
    }

    /// Binary format: magic, version, dimensions, spacing, origin,
    /// calibration, seed, then `nx * ny` little-endian f64 elevations.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SURFACE_MAGIC)?;
        w.write_all(&SURFACE_VERSION.to_le_bytes())?;
        w.write_all(&(self.nx as u64).to_le_bytes())?;
        w.write_all(&(self.ny as u64).to_le_bytes())?;
        for v in [self.spacing, self.origin.0, self.origin.1, self.calibration] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        for v in &self.z {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CcdError::MissingPath(path.to_path_buf()));
        }
        let bad = |reason: &str| CcdError::Format { path: path.display().to_string(), reason: reason.to_string() };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SURFACE_MAGIC {
            return Err(bad("not a road surface file"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != SURFACE_VERSION {
            return Err(bad("unsupported surface version"));
        }
        let mut read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let nx = read_u64(&mut r)? as usize;
        let ny = read_u64(&mut r)? as usize;
        let spacing = f64::from_bits(read_u64(&mut r)?);
        let ox = f64::from_bits(read_u64(&mut r)?);
        let oy = f64::from_bits(read_u64(&mut r)?);
        let calibration = f64::from_bits(read_u64(&mut r)?);
        let seed = read_u64(&mut r)?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != nx * ny * 8 {
            return Err(bad("truncated elevation grid"));
        }
        let z = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Self::from_grid(nx, ny, spacing, (ox, oy), z, calibration, seed)
    }

    /// `x,y,z` rows for every node.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "z"])?;
        for j in 0..self.ny {
            for i in 0..self.nx {
                let x = self.origin.0 + i as f64 * self.spacing;
                let y = self.origin.1 + j as f64 * self.spacing;
                w.write_record([x.to_string(), y.to_string(), self.node(i, j).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
