//! PSNR, bits per pixel, rate-distortion curves and Bjøntegaard-delta rate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImagePatch;

/// PSNR in dB for samples in `[0, 1]`; infinite for identical images.
pub fn psnr(x: &ImagePatch, x_hat: &ImagePatch) -> Result<f64> {
    if x.width() != x_hat.width() || x.height() != x_hat.height() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            x.width(),
            x.height(),
            x_hat.width(),
            x_hat.height()
        )));
    }
    Ok(psnr_from_mse(mse(x.samples(), x_hat.samples())))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn format_psnr(db: f64) -> String {
    if db.is_infinite() {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}

pub fn bits_per_pixel(bytes: usize, pixels: usize) -> Result<f64> {
    if pixels == 0 {
        return Err(Error::InvalidArgument("image without pixels".into()));
    }
    Ok(8.0 * bytes as f64 / pixels as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_db: f64,
}

/// Rate-distortion points sorted by increasing rate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

pub const MIN_CURVE_POINTS: usize = 4;

impl RdCurve {
    /// Sorts by rate and checks that rates are positive and distinct and
    /// that every PSNR is finite. A PSNR that does not grow with rate is
    /// only logged.
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("empty rate-distortion curve".into()));
        }
        if points.iter().any(|p| !(p.bpp > 0.0 && p.bpp.is_finite()) || !p.psnr_db.is_finite()) {
            return Err(Error::InvalidArgument("rates must be positive and PSNR finite".into()));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::InvalidArgument("duplicate rate in curve".into()));
        }
        if points.windows(2).any(|w| w[1].psnr_db <= w[0].psnr_db) {
            log::warn!("PSNR does not increase strictly with rate");
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `n` highest-rate points.
    pub fn top(&self, n: usize) -> RdCurve {
        RdCurve { points: self.points[self.points.len().saturating_sub(n)..].to_vec() }
    }

    /// The `n` lowest-rate points.
    pub fn bottom(&self, n: usize) -> RdCurve {
        RdCurve { points: self.points[..n.min(self.points.len())].to_vec() }
    }

    pub fn scale_rates(&self, f: f64) -> RdCurve {
        RdCurve {
            points: self.points.iter().map(|p| RdPoint { bpp: p.bpp * f, ..*p }).collect(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for p in &self.points {
            w.serialize(p).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let points = r.deserialize().collect::<std::result::Result<Vec<RdPoint>, _>>().map_err(csv_err)?;
        RdCurve::new(points)
    }
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Malformed(format!("csv: {e}"))
    }
}

/// Monotone piecewise cubic Hermite interpolant (Fritsch-Carlson slopes,
/// three-point end conditions).
#[derive(Debug, Clone, PartialEq)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::InvalidArgument("interpolation needs at least two points".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("abscissae must increase strictly".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                let (a, b) = (delta[k - 1], delta[k]);
                if a * b > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / a + w2 / b);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Pchip { x: x.to_vec(), y: y.to_vec(), d })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    fn segment(&self, t: f64) -> usize {
        match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            i => (i - 1).min(self.x.len() - 2),
        }
    }

    /// Polynomial coefficients of segment `k` in `s = t - x_k`.
    fn coeffs(&self, k: usize) -> [f64; 4] {
        let h = self.x[k + 1] - self.x[k];
        let delta = (self.y[k + 1] - self.y[k]) / h;
        let (d0, d1) = (self.d[k], self.d[k + 1]);
        [self.y[k], d0, (3.0 * delta - 2.0 * d0 - d1) / h, (d0 + d1 - 2.0 * delta) / (h * h)]
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let [c0, c1, c2, c3] = self.coeffs(k);
        let s = t - self.x[k];
        c0 + s * (c1 + s * (c2 + s * c3))
    }

    /// Exact integral over `[a, b]` within the domain.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let lo = a.max(self.x[k]);
            let hi = b.min(self.x[k + 1]);
            if hi <= lo {
                continue;
            }
            let [c0, c1, c2, c3] = self.coeffs(k);
            let prim = |s: f64| s * (c0 + s * (c1 / 2.0 + s * (c2 / 3.0 + s * c3 / 4.0)));
            total += prim(hi - self.x[k]) - prim(lo - self.x[k]);
        }
        total
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() || d0 == 0.0 {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

fn log_rate_interpolant(curve: &RdCurve) -> Result<Pchip> {
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.psnr_db, p.bpp.log10())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Pchip::new(&x, &y)
}

/// Average rate difference of `test` relative to `reference` at equal PSNR,
/// in percent; negative values are savings. Curves need at least
/// `min_points` points.
pub fn bd_rate_with_min(test: &RdCurve, reference: &RdCurve, min_points: usize) -> Result<f64> {
    for c in [test, reference] {
        if c.len() < min_points {
            return Err(Error::InvalidArgument(format!("curve has {} points, need {min_points}", c.len())));
        }
        if c.len() < MIN_CURVE_POINTS {
            log::warn!("BD-rate from a {}-point curve", c.len());
        }
    }
    let (pt, pr) = (log_rate_interpolant(test)?, log_rate_interpolant(reference)?);
    let (t0, t1) = pt.domain();
    let (r0, r1) = pr.domain();
    let (lo, hi) = (t0.max(r0), t1.min(r1));
    if hi <= lo {
        return Err(Error::InvalidArgument("PSNR ranges do not overlap".into()));
    }
    let mean = (pt.integrate(lo, hi) - pr.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(mean) - 1.0) * 100.0)
}

pub fn bd_rate(test: &RdCurve, reference: &RdCurve) -> Result<f64> {
    bd_rate_with_min(test, reference, MIN_CURVE_POINTS)
}

/// High and low BD-rates from the top and bottom three rate points.
pub fn bd_rate_split(test: &RdCurve, reference: &RdCurve) -> Result<(f64, f64)> {
    let high = bd_rate_with_min(&test.top(3), &reference.top(3), 3)?;
    let low = bd_rate_with_min(&test.bottom(3), &reference.bottom(3), 3)?;
    Ok((high, low))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BdRow {
    pub image: String,
    pub bd_high_pct: f64,
    pub bd_low_pct: f64,
}

/// Per-image rows followed by an `average` row.
pub fn bd_report(rows: &[BdRow]) -> Vec<BdRow> {
    let mut out = rows.to_vec();
    if !rows.is_empty() {
        let n = rows.len() as f64;
        out.push(BdRow {
            image: "average".into(),
            bd_high_pct: rows.iter().map(|r| r.bd_high_pct).sum::<f64>() / n,
            bd_low_pct: rows.iter().map(|r| r.bd_low_pct).sum::<f64>() / n,
        });
    }
    out
}

pub fn write_bd_report(rows: &[BdRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in bd_report(rows) {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
