//! Image-method ray tracer for planar scenes: line of sight plus single-bounce
//! specular reflections, assembled into MIMO channel matrices.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::antenna::{steering_vector, wavelength, ArraySpec, SPEED_OF_LIGHT};
use crate::channel::ChannelMatrix;
use crate::dataset::{Dataset, Measurement};
use crate::error::{Error, Result};
use crate::math::{Aabb, Complex, Vec3};

pub const DEFAULT_CARRIER_HZ: f64 = 2.4e9;
/// Receivers closer than this to any plane are redrawn.
pub const MIN_CLEARANCE: f64 = 0.1;
pub const MAX_REJECTIONS: usize = 100;
pub const FT3_PER_M3: f64 = 1.0 / (0.3048 * 0.3048 * 0.3048);

const GEOM_EPS: f64 = 1e-9;

/// Free-space path loss in dB.
pub fn fspl_db(d: f64, f: f64) -> Result<f64> {
    if !(d > 0.0) || !(f > 0.0) {
        return Err(Error::InvalidArgument(format!("path loss needs positive distance and frequency, got d={d}, f={f}")));
    }
    Ok(20.0 * d.log10() + 20.0 * f.log10() + 20.0 * (4.0 * PI / SPEED_OF_LIGHT).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fresnel {
    pub gamma_p: Complex,
    pub gamma_s: Complex,
}

/// Reflection coefficients for a wave meeting a surface at grazing angle `theta`
/// (measured from the surface) on a half-space of relative permittivity `eps`.
pub fn fresnel(theta: f64, eps: Complex) -> Fresnel {
    let (s, c) = theta.sin_cos();
    let root = (eps - c * c).sqrt();
    Fresnel { gamma_p: (s - root) / (s + root), gamma_s: (eps * s - root) / (eps * s + root) }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Concrete,
    Glass,
    Wood,
}

impl Material {
    pub fn permittivity(self) -> Complex {
        match self {
            Material::Concrete => Complex::new(5.31, -0.28),
            Material::Glass => Complex::new(6.27, -0.17),
            Material::Wood => Complex::new(1.99, -0.19),
        }
    }
}

/// Planar reflector, a rectangle centered at `point` when `extent` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub point: Vec3,
    pub normal: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    /// Full widths along `u_axis` and `v_axis`; `None` is unbounded.
    pub extent: Option<[f64; 2]>,
    pub eps_r: Complex,
}

impl Plane {
    pub fn new(point: Vec3, normal: Vec3, extent: Option<[f64; 2]>, eps_r: Complex) -> Result<Self> {
        let normal = normal.normalized().ok_or_else(|| Error::InvalidArgument("plane normal is zero".into()))?;
        if eps_r.re < 1.0 {
            return Err(Error::InvalidArgument(format!("relative permittivity {eps_r} has real part below 1")));
        }
        let seed = if normal.cross(Vec3::new(0.0, 0.0, 1.0)).norm() > 1e-6 {
            Vec3::new(0.0, 0.0, 1.0)
        } else {
            Vec3::new(1.0, 0.0, 0.0)
        };
        let u_axis = normal.cross(seed).normalized().expect("non-parallel");
        let v_axis = normal.cross(u_axis);
        Ok(Plane { point, normal, u_axis, v_axis, extent, eps_r })
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        (p - self.point).dot(self.normal)
    }

    fn local(&self, p: Vec3) -> (f64, f64) {
        let d = p - self.point;
        (d.dot(self.u_axis), d.dot(self.v_axis))
    }

    /// Whether the projection of `p` falls on the plane's rectangle.
    pub fn within_extent(&self, p: Vec3) -> bool {
        match self.extent {
            None => true,
            Some([w, h]) => {
                let (a, b) = self.local(p);
                a.abs() <= 0.5 * w + GEOM_EPS && b.abs() <= 0.5 * h + GEOM_EPS
            }
        }
    }

    /// Distance from `p` to the (possibly bounded) plane.
    pub fn distance(&self, p: Vec3) -> f64 {
        let n = self.signed_distance(p).abs();
        match self.extent {
            None => n,
            Some([w, h]) => {
                let (a, b) = self.local(p);
                let da = (a.abs() - 0.5 * w).max(0.0);
                let db = (b.abs() - 0.5 * h).max(0.0);
                (n * n + da * da + db * db).sqrt()
            }
        }
    }

    /// Parameter `t ∈ (0, 1)` where segment `a → b` crosses the plane inside its extent.
    fn crossing(&self, a: Vec3, b: Vec3) -> Option<f64> {
        let dir = b - a;
        let den = dir.dot(self.normal);
        if den.abs() < 1e-15 {
            return None;
        }
        let t = (self.point - a).dot(self.normal) / den;
        (t > GEOM_EPS && t < 1.0 - GEOM_EPS && self.within_extent(a + dir * t)).then_some(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub carrier_hz: f64,
    pub bounds: Aabb,
    pub planes: Vec<Plane>,
    pub tx_array: ArraySpec,
    pub rx_array: ArraySpec,
    pub tx_position: Option<Vec3>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneFile {
    point: Vec3,
    normal: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extent_uv: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    material: Option<Material>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps_re: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps_im: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    carrier_hz: f64,
    bounds: Aabb,
    planes: Vec<PlaneFile>,
    tx_array: ArraySpec,
    rx_array: ArraySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tx_position: Option<Vec3>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > 0.0) {
            return Err(Error::InvalidArgument("carrier_hz must be positive".into()));
        }
        let e = self.bounds.extent();
        if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) {
            return Err(Error::InvalidArgument("scene bounds must have positive volume".into()));
        }
        self.tx_array.validate()?;
        self.rx_array.validate()
    }

    pub fn wavelength(&self) -> f64 {
        wavelength(self.carrier_hz)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: SceneFile = serde_json::from_str(s)?;
        let planes = f
            .planes
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let eps = match (p.material, p.eps_re) {
                    (Some(m), None) => m.permittivity(),
                    (None, Some(re)) => Complex::new(re, p.eps_im.unwrap_or(0.0)),
                    _ => {
                        return Err(Error::InvalidArgument(format!("plane {i}: give exactly one of `material` or `eps_re`")))
                    }
                };
                Plane::new(p.point, p.normal, p.extent_uv, eps)
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = Scene {
            carrier_hz: f.carrier_hz,
            bounds: f.bounds,
            planes,
            tx_array: f.tx_array,
            rx_array: f.rx_array,
            tx_position: f.tx_position,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let f = SceneFile {
            carrier_hz: self.carrier_hz,
            bounds: self.bounds,
            planes: self
                .planes
                .iter()
                .map(|p| PlaneFile {
                    point: p.point,
                    normal: p.normal,
                    extent_uv: p.extent,
                    material: None,
                    eps_re: Some(p.eps_r.re),
                    eps_im: Some(p.eps_r.im),
                })
                .collect(),
            tx_array: self.tx_array,
            rx_array: self.rx_array,
            tx_position: self.tx_position,
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// A closed `lx × ly × lz` room: concrete floor, ceiling and two walls,
    /// one glass wall and one wood wall. The transmitter sits near a corner.
    pub fn room(lx: f64, ly: f64, lz: f64, carrier_hz: f64, tx_array: ArraySpec, rx_array: ArraySpec) -> Result<Self> {
        let c = Material::Concrete.permittivity();
        let planes = vec![
            Plane::new(Vec3::new(lx / 2.0, ly / 2.0, 0.0), Vec3::new(0.0, 0.0, 1.0), Some([ly, lx]), c)?,
            Plane::new(Vec3::new(lx / 2.0, ly / 2.0, lz), Vec3::new(0.0, 0.0, -1.0), Some([ly, lx]), c)?,
            Plane::new(Vec3::new(0.0, ly / 2.0, lz / 2.0), Vec3::new(1.0, 0.0, 0.0), Some([ly, lz]), c)?,
            Plane::new(Vec3::new(lx, ly / 2.0, lz / 2.0), Vec3::new(-1.0, 0.0, 0.0), Some([ly, lz]), Material::Glass.permittivity())?,
            Plane::new(Vec3::new(lx / 2.0, 0.0, lz / 2.0), Vec3::new(0.0, 1.0, 0.0), Some([lx, lz]), Material::Wood.permittivity())?,
            Plane::new(Vec3::new(lx / 2.0, ly, lz / 2.0), Vec3::new(0.0, -1.0, 0.0), Some([lx, lz]), c)?,
        ];
        let scene = Scene {
            carrier_hz,
            bounds: Aabb::new(Vec3::ZERO, Vec3::new(lx, ly, lz)),
            planes,
            tx_array,
            rx_array,
            tx_position: Some(Vec3::new(0.15 * lx, 0.2 * ly, 0.8 * lz)),
        };
        scene.validate()?;
        Ok(scene)
    }

    /// The 10 × 10 × 3 m conference-room box at 2.4 GHz.
    pub fn conference_box(tx_array: ArraySpec, rx_array: ArraySpec) -> Result<Self> {
        Scene::room(10.0, 10.0, 3.0, DEFAULT_CARRIER_HZ, tx_array, rx_array)
    }

    fn blocked(&self, a: Vec3, b: Vec3, skip: Option<usize>) -> bool {
        self.planes.iter().enumerate().any(|(j, p)| Some(j) != skip && p.crossing(a, b).is_some())
    }

    fn on_a_plane(&self, p: Vec3) -> bool {
        self.planes.iter().any(|pl| pl.signed_distance(p).abs() < GEOM_EPS && pl.within_extent(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PathKind {
    LineOfSight,
    Reflection { plane: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayPath {
    pub kind: PathKind,
    pub length: f64,
    pub delay: f64,
    pub amplitude: f64,
    pub phase: f64,
    /// Azimuth and elevation leaving the transmitter.
    pub departure: (f64, f64),
    /// Azimuth and elevation pointing from the receiver back along the arriving ray.
    pub arrival: (f64, f64),
    pub reflection: Complex,
}

fn make_path(kind: PathKind, length: f64, first: Vec3, last: Vec3, gamma: Complex, f: f64) -> Result<RayPath> {
    let delay = length / SPEED_OF_LIGHT;
    Ok(RayPath {
        kind,
        length,
        delay,
        amplitude: 10f64.powf(-fspl_db(length, f)? / 20.0) * gamma.norm(),
        phase: -2.0 * PI * f * delay + gamma.arg(),
        departure: first.azimuth_elevation(),
        arrival: last.azimuth_elevation(),
        reflection: gamma,
    })
}

/// Effective reflection coefficient for a vertically polarized wave travelling
/// along `k` onto `plane`, blending the two Fresnel coefficients by how the field
/// splits against the plane of incidence.
fn effective_reflection(k: Vec3, plane: &Plane) -> Complex {
    let sin_theta = k.dot(plane.normal).abs().min(1.0);
    let fr = fresnel(sin_theta.asin(), plane.eps_r);
    let z = Vec3::new(0.0, 0.0, 1.0);
    let e = (z - k * z.dot(k)).normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0));
    let perp_share = match k.cross(plane.normal).normalized() {
        Some(s) => e.dot(s).powi(2),
        None => 0.0,
    };
    fr.gamma_p * (1.0 - perp_share) + fr.gamma_s * perp_share
}

pub fn trace(scene: &Scene, tx: Vec3, rx: Vec3) -> Result<Vec<RayPath>> {
    if tx.distance(rx) < GEOM_EPS {
        return Err(Error::DegenerateGeometry("transmitter and receiver coincide".into()));
    }
    if scene.on_a_plane(tx) {
        return Err(Error::DegenerateGeometry("transmitter lies on a reflecting plane".into()));
    }
    if scene.on_a_plane(rx) {
        return Err(Error::DegenerateGeometry("receiver lies on a reflecting plane".into()));
    }
    let f = scene.carrier_hz;
    let mut paths = Vec::new();
    if !scene.blocked(tx, rx, None) {
        paths.push(make_path(PathKind::LineOfSight, tx.distance(rx), rx - tx, tx - rx, Complex::new(1.0, 0.0), f)?);
    }
    for (j, pl) in scene.planes.iter().enumerate() {
        let (st, sr) = (pl.signed_distance(tx), pl.signed_distance(rx));
        if st * sr <= 0.0 {
            continue;
        }
        let image = tx - pl.normal * (2.0 * st);
        let dir = rx - image;
        let den = dir.dot(pl.normal);
        if den.abs() < 1e-15 {
            continue;
        }
        let hit = image + dir * ((pl.point - image).dot(pl.normal) / den);
        if !pl.within_extent(hit) || scene.blocked(tx, hit, Some(j)) || scene.blocked(hit, rx, Some(j)) {
            continue;
        }
        let k = (hit - tx).normalized().expect("tx is off the plane");
        let gamma = effective_reflection(k, pl);
        paths.push(make_path(PathKind::Reflection { plane: j }, dir.norm(), hit - tx, hit - rx, gamma, f)?);
    }
    Ok(paths)
}

/// `H[t][r] = Σ_l a_l e^{jφ_l} a_R[r] conj(a_T[t])`
pub fn assemble_channel(paths: &[RayPath], scene: &Scene) -> Result<ChannelMatrix> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no propagation paths".into()));
    }
    let lambda = scene.wavelength();
    let tx_off = scene.tx_array.element_offsets(lambda);
    let rx_off = scene.rx_array.element_offsets(lambda);
    let (nt, nr) = (tx_off.len(), rx_off.len());
    let mut h = ChannelMatrix::zeros(nt, nr);
    for p in paths {
        let at = steering_vector(&tx_off, lambda, p.departure.0, p.departure.1);
        let ar = steering_vector(&rx_off, lambda, p.arrival.0, p.arrival.1);
        let g = Complex::from_polar(p.amplitude, p.phase);
        for t in 0..nt {
            for r in 0..nr {
                h.data[t * nr + r] += g * ar[r] * at[t].conj();
            }
        }
    }
    Ok(h)
}

/// Number of samples for a density in samples per cubic foot.
pub fn samples_for_density(bounds: &Aabb, per_ft3: f64) -> usize {
    (per_ft3 * bounds.volume() * FT3_PER_M3).round() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerationStats {
    pub count: usize,
    pub density_per_ft3: f64,
    pub mean_paths: f64,
    pub los_fraction: f64,
    pub rejections: usize,
}

/// `count` receivers drawn uniformly in the scene bounds, each from its own
/// `(seed, index)` random stream.
pub fn generate_dataset(scene: &Scene, tx: Vec3, count: usize, seed: u64) -> Result<(Dataset, GenerationStats)> {
    scene.validate()?;
    if !scene.bounds.contains(tx) {
        return Err(Error::InvalidArgument("transmitter is outside the scene bounds".into()));
    }
    if scene.on_a_plane(tx) {
        return Err(Error::DegenerateGeometry("transmitter lies on a reflecting plane".into()));
    }
    let b = scene.bounds;
    let e = b.extent();
    let samples: Vec<Result<(Measurement, usize, bool, usize)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for attempt in 0..=MAX_REJECTIONS {
                let rx = b.min + Vec3::new(rng.gen::<f64>() * e.x, rng.gen::<f64>() * e.y, rng.gen::<f64>() * e.z);
                if scene.planes.iter().any(|p| p.distance(rx) < MIN_CLEARANCE) || rx.distance(tx) < MIN_CLEARANCE {
                    continue;
                }
                let paths = trace(scene, tx, rx)?;
                if paths.is_empty() {
                    continue;
                }
                let los = paths.iter().any(|p| p.kind == PathKind::LineOfSight);
                let h = assemble_channel(&paths, scene)?;
                return Ok((Measurement { tx, rx, h }, paths.len(), los, attempt));
            }
            Err(Error::Placement { index: i, attempts: MAX_REJECTIONS })
        })
        .collect();
    let mut records = Vec::with_capacity(count);
    let (mut npaths, mut nlos, mut rejections) = (0usize, 0usize, 0usize);
    for s in samples {
        let (m, np, los, rej) = s?;
        records.push(m);
        npaths += np;
        nlos += los as usize;
        rejections += rej;
    }
    let stats = GenerationStats {
        count,
        density_per_ft3: count as f64 / (b.volume() * FT3_PER_M3),
        mean_paths: if count > 0 { npaths as f64 / count as f64 } else { 0.0 },
        los_fraction: if count > 0 { nlos as f64 / count as f64 } else { 0.0 },
        rejections,
    };
    let ds = Dataset {
        nt: scene.tx_array.len(),
        nr: scene.rx_array.len(),
        carrier_hz: scene.carrier_hz,
        tx_array: Some(scene.tx_array),
        rx_array: Some(scene.rx_array),
        bounds: Some(b),
        records,
    };
    Ok((ds, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fspl_one_meter_one_gigahertz() {
        assert!((fspl_db(1.0, 1e9).unwrap() - 32.4478).abs() < 1e-3);
    }

    #[test]
    fn fspl_rejects_zero_distance() {
        assert!(fspl_db(0.0, 1e9).is_err());
    }

    #[test]
    fn density_of_conference_box() {
        let b = Aabb::new(Vec3::ZERO, Vec3::new(10.0, 10.0, 3.0));
        assert!((b.volume() * FT3_PER_M3 - 10594.4).abs() < 0.1);
        assert_eq!(samples_for_density(&b, 0.011), 117);
    }
}
