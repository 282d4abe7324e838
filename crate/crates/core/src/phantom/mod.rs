//! Procedural lung-slice phantoms with exact nodule masks.
//!
//! Each phantom has two dark elliptical lung fields on a darker background,
//! small bright vessel dots inside the lungs, and larger, brighter nodule
//! disks. The mask is exactly the union of the nodule disks. Vessels are
//! deliberately close in intensity to nodules so that segmentation has to
//! use size and shape, not just brightness.

mod dataset;
pub mod io;

pub use dataset::{build_dataset, load_case, CaseEntry, DatasetManifest, LoadedCase, Split, SplitCounts};
pub use io::{load_volume, save_volume};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intensities {
    pub background: f32,
    pub lung: f32,
    pub vessel: f32,
    pub nodule: f32,
}

impl Default for Intensities {
    fn default() -> Self {
        Self { background: -1.0, lung: -0.6, vessel: 0.4, nodule: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// `[height, width]` in pixels.
    pub image_size: Vec<usize>,
    pub nodule_count_range: [usize; 2],
    pub nodule_radius_range: [f64; 2],
    pub vessel_count_range: [usize; 2],
    pub vessel_radius_range: [f64; 2],
    pub intensities: Intensities,
    pub noise_sigma: f64,
    pub allow_pleural_contact: bool,
    /// Probability that a nodule is placed against the lung boundary.
    pub pleural_prob: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: vec![64, 64],
            nodule_count_range: [1, 3],
            nodule_radius_range: [2.0, 5.0],
            vessel_count_range: [6, 14],
            vessel_radius_range: [0.8, 1.5],
            intensities: Intensities::default(),
            noise_sigma: 0.05,
            allow_pleural_contact: true,
            pleural_prob: 0.3,
        }
    }
}

/// Smallest admissible nodule radius in pixels.
pub const MIN_NODULE_RADIUS: f64 = 2.0;

impl PhantomSpec {
    /// Problems with the spec, keyed by field name.
    pub fn issues(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |k: &str, m: String| out.push((k.to_string(), m));
        if self.image_size.len() != 2 || self.image_size.iter().any(|&e| e < 16) {
            bad("image_size", format!("need two extents >= 16, got {:?}", self.image_size));
        }
        let [nmin, nmax] = self.nodule_count_range;
        if nmin > nmax {
            bad("nodule_count_range", format!("min {nmin} > max {nmax}"));
        }
        let [rmin, rmax] = self.nodule_radius_range;
        if !(rmin >= MIN_NODULE_RADIUS && rmin <= rmax) {
            bad("nodule_radius_range", format!("need {MIN_NODULE_RADIUS} <= r_min <= r_max, got [{rmin}, {rmax}]"));
        }
        let [vmin, vmax] = self.vessel_count_range;
        if vmin > vmax {
            bad("vessel_count_range", format!("min {vmin} > max {vmax}"));
        }
        let [vrmin, vrmax] = self.vessel_radius_range;
        if !(vrmin > 0.0 && vrmin <= vrmax) {
            bad("vessel_radius_range", format!("need 0 < min <= max, got [{vrmin}, {vrmax}]"));
        }
        let iv = self.intensities;
        for (k, v) in [("background", iv.background), ("lung", iv.lung), ("vessel", iv.vessel), ("nodule", iv.nodule)] {
            if !(-1.0..=1.0).contains(&v) {
                bad(&format!("intensities.{k}"), format!("{v} outside [-1, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            bad("noise_sigma", format!("must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.pleural_prob) {
            bad("pleural_prob", format!("must lie in [0, 1], got {}", self.pleural_prob));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.issues().first() {
            None => Ok(()),
            Some((k, m)) => Err(Error::InvalidArgument(format!("phantom spec {k}: {m}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Semi-axes along (row, column).
    pub radii: [f64; 2],
}

impl Ellipse {
    fn level(&self, y: f64, x: f64) -> f64 {
        ((y - self.center[0]) / self.radii[0]).powi(2) + ((x - self.center[1]) / self.radii[1]).powi(2)
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        self.level(y, x) <= 1.0
    }

    /// Whether the closed disk lies inside the ellipse, tested on a ring of
    /// points (exact up to the ring resolution; `margin` pads the radius).
    fn contains_disk(&self, c: [f64; 2], r: f64, margin: f64) -> bool {
        const RING: [[f64; 2]; 16] = ring16();
        RING.iter().all(|d| self.contains(c[0] + (r + margin) * d[0], c[1] + (r + margin) * d[1]))
    }

    fn random_interior(&self, rng: &mut Rng) -> [f64; 2] {
        loop {
            let u: f64 = rng.random_range(-1.0..1.0);
            let v: f64 = rng.random_range(-1.0..1.0);
            if u * u + v * v <= 1.0 {
                return [self.center[0] + u * self.radii[0], self.center[1] + v * self.radii[1]];
            }
        }
    }
}

/// Unit vectors at 22.5° spacing, written out so generation uses no
/// platform transcendental functions.
const fn ring16() -> [[f64; 2]; 16] {
    const C1: f64 = 0.923_879_532_511_286_7;
    const S1: f64 = 0.382_683_432_365_089_8;
    const H: f64 = std::f64::consts::FRAC_1_SQRT_2;
    let base = [[0.0, 1.0], [S1, C1], [H, H], [C1, S1]];
    let mut out = [[0.0; 2]; 16];
    let mut q = 0;
    while q < 4 {
        let mut i = 0;
        while i < 4 {
            let [s, c] = base[i];
            // rotate by q·90°
            out[q * 4 + i] = match q {
                0 => [s, c],
                1 => [c, -s],
                2 => [-s, -c],
                _ => [-c, s],
            };
            i += 1;
        }
        q += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nodule {
    pub center: [f64; 2],
    pub radius: f64,
    pub pleural: bool,
}

impl Nodule {
    /// Pixel `(y, x)` (pixel centers on integer coordinates) lies in the disk.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        (y as f64 - self.center[0]).powi(2) + (x as f64 - self.center[1]).powi(2) <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub lungs: Vec<Ellipse>,
    pub nodules: Vec<Nodule>,
    pub vessels: Vec<Nodule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub mask: Volume,
    pub meta: PhantomMeta,
}

const PLACEMENT_RETRIES: usize = 200;

fn lungs(h: f64, w: f64, rng: &mut Rng) -> Vec<Ellipse> {
    let cy = h * (0.5 + rng.random_range(-0.04..0.04));
    let ry = h * rng.random_range(0.30..0.37);
    [0.29, 0.71]
        .iter()
        .map(|&fx| Ellipse {
            center: [cy + h * rng.random_range(-0.02..0.02), w * (fx + rng.random_range(-0.025..0.025))],
            radii: [ry * rng.random_range(0.92..1.0), w * rng.random_range(0.15..0.19)],
        })
        .collect()
}

/// Push a disk of radius `r` from the lung center along a random direction
/// until it rests against the lung boundary.
fn pleural_center(lung: &Ellipse, r: f64, rng: &mut Rng) -> Option<[f64; 2]> {
    let dir = loop {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        let n = (a * a + b * b).sqrt();
        if n > 0.1 && n <= 1.0 {
            break [a / n, b / n];
        }
    };
    let at = |s: f64| [lung.center[0] + s * dir[0] * lung.radii[0], lung.center[1] + s * dir[1] * lung.radii[1]];
    if !lung.contains_disk(at(0.0), r, 0.0) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if lung.contains_disk(at(mid), r, 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(at(lo))
}

fn place_nodules(spec: &PhantomSpec, lungs: &[Ellipse], rng: &mut Rng) -> Result<Vec<Nodule>> {
    let [nmin, nmax] = spec.nodule_count_range;
    let count = rng.random_range(nmin..=nmax);
    let [rmin, rmax] = spec.nodule_radius_range;
    let mut out: Vec<Nodule> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let radius = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
            let lung = &lungs[rng.random_range(0..lungs.len())];
            let pleural = spec.allow_pleural_contact && rng.random::<f64>() < spec.pleural_prob;
            let center = if pleural {
                match pleural_center(lung, radius, rng) {
                    Some(c) => c,
                    None => continue,
                }
            } else {
                let c = lung.random_interior(rng);
                // One pixel clearance from the pleura for interior nodules.
                if !lung.contains_disk(c, radius, 1.0) {
                    continue;
                }
                c
            };
            let apart = out.iter().all(|o| {
                let d2 = (o.center[0] - center[0]).powi(2) + (o.center[1] - center[1]).powi(2);
                d2 > (o.radius + radius + 1.5).powi(2)
            });
            if apart {
                placed = Some(Nodule { center, radius, pleural });
                break;
            }
        }
        let n = placed.ok_or_else(|| {
            Error::Placement(format!(
                "nodule {k} of {count} (radius range {rmin}..{rmax}) did not fit inside the lung fields after {PLACEMENT_RETRIES} attempts"
            ))
        })?;
        out.push(n);
    }
    Ok(out)
}

fn place_vessels(spec: &PhantomSpec, lungs: &[Ellipse], rng: &mut Rng) -> Vec<Nodule> {
    let [vmin, vmax] = spec.vessel_count_range;
    let count = rng.random_range(vmin..=vmax);
    let [rmin, rmax] = spec.vessel_radius_range;
    (0..count)
        .filter_map(|_| {
            let radius = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
            let lung = &lungs[rng.random_range(0..lungs.len())];
            let center = lung.random_interior(rng);
            lung.contains_disk(center, radius, 0.5).then_some(Nodule { center, radius, pleural: false })
        })
        .collect()
}

/// Deterministic phantom for `(spec, case_seed)`.
pub fn generate_phantom(spec: &PhantomSpec, case_seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let (h, w) = (spec.image_size[0], spec.image_size[1]);
    let mut r = rng::stream(case_seed, "phantom", 0);
    let lung_fields = lungs(h as f64, w as f64, &mut r);
    let vessels = place_vessels(spec, &lung_fields, &mut r);
    let nodules = place_nodules(spec, &lung_fields, &mut r)?;

    let iv = spec.intensities;
    let mut image = vec![iv.background; h * w];
    let mut mask = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let px = &mut image[y * w + x];
            if lung_fields.iter().any(|l| l.contains(fy, fx)) {
                *px = iv.lung;
            }
            if vessels.iter().any(|v| v.covers(y, x)) {
                *px = iv.vessel;
            }
            if nodules.iter().any(|n| n.covers(y, x)) {
                *px = iv.nodule;
                mask[y * w + x] = 1.0;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = rng::normal_vec(&mut r, h * w);
        for (p, z) in image.iter_mut().zip(noise) {
            *p = (*p as f64 + spec.noise_sigma * z as f64).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok(Phantom {
        image: Volume::new(1, vec![h, w], image)?,
        mask: Volume::new(1, vec![h, w], mask)?,
        meta: PhantomMeta { lungs: lung_fields, nodules, vessels },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_nodules_means_empty_mask() {
        let spec = PhantomSpec { nodule_count_range: [0, 0], ..PhantomSpec::default() };
        for seed in 0..5 {
            let p = generate_phantom(&spec, seed).unwrap();
            assert!(p.mask.data().iter().all(|&v| v == 0.0));
            assert!(p.meta.nodules.is_empty());
        }
    }

    #[test]
    fn mask_is_exactly_the_union_of_disks() {
        let spec = PhantomSpec::default();
        for seed in 0..20 {
            let p = generate_phantom(&spec, seed).unwrap();
            let (h, w) = (64, 64);
            for y in 0..h {
                for x in 0..w {
                    let inside = p.meta.nodules.iter().any(|n| {
                        let dy = y as f64 - n.center[0];
                        let dx = x as f64 - n.center[1];
                        dy * dy + dx * dx <= n.radius * n.radius
                    });
                    assert_eq!(p.mask.data()[y * w + x] == 1.0, inside);
                }
            }
            assert!(p.mask.is_binary());
            assert!(p.meta.nodules.iter().all(|n| n.radius >= MIN_NODULE_RADIUS));
        }
    }

    #[test]
    fn single_nodule_area_matches_pixel_enumeration() {
        let spec =
            PhantomSpec { nodule_count_range: [1, 1], nodule_radius_range: [3.3, 3.3], ..PhantomSpec::default() };
        let p = generate_phantom(&spec, 11).unwrap();
        let n = p.meta.nodules[0];
        let mut count = 0;
        for y in 0..64i64 {
            for x in 0..64i64 {
                let (dy, dx) = (y as f64 - n.center[0], x as f64 - n.center[1]);
                if (dy * dy + dx * dx).sqrt() <= n.radius {
                    count += 1;
                }
            }
        }
        let masked = p.mask.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(masked, count);
        // A radius-3.3 disk covers roughly pi·r² ≈ 34 pixels.
        assert!((25..=45).contains(&masked), "{masked}");
    }

    #[test]
    fn nodules_lie_inside_lungs_and_some_touch_the_pleura() {
        let spec = PhantomSpec { pleural_prob: 1.0, ..PhantomSpec::default() };
        let mut touching = 0;
        for seed in 0..10 {
            let p = generate_phantom(&spec, seed).unwrap();
            for n in &p.meta.nodules {
                let lung = p.meta.lungs.iter().find(|l| l.contains(n.center[0], n.center[1])).unwrap();
                assert!(lung.contains_disk(n.center, n.radius, -1e-6));
                if !lung.contains_disk(n.center, n.radius, 0.3) {
                    touching += 1;
                }
            }
        }
        assert!(touching > 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, 42).unwrap();
        let b = generate_phantom(&spec, 42).unwrap();
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.image), bits(&b.image));
        assert_eq!(bits(&a.mask), bits(&b.mask));
        assert_ne!(bits(&a.image), bits(&generate_phantom(&spec, 43).unwrap().image));
    }

    #[test]
    fn impossible_placement_names_the_constraint() {
        let spec = PhantomSpec {
            image_size: vec![16, 16],
            nodule_count_range: [3, 3],
            nodule_radius_range: [6.0, 6.0],
            ..PhantomSpec::default()
        };
        let err = generate_phantom(&spec, 1).unwrap_err();
        assert!(matches!(err, Error::Placement(_)));
        assert!(err.to_string().contains("did not fit"));
    }

    #[test]
    fn spec_validation() {
        let bad = PhantomSpec { nodule_radius_range: [1.5, 4.0], ..PhantomSpec::default() };
        assert!(bad.validate().is_err());
        let bad = PhantomSpec {
            intensities: Intensities { nodule: 1.5, ..Intensities::default() },
            ..PhantomSpec::default()
        };
        assert!(bad.issues().iter().any(|(k, _)| k == "intensities.nodule"));
    }

    #[test]
    fn ring_points_are_unit_vectors() {
        for d in ring16() {
            assert!((d[0] * d[0] + d[1] * d[1] - 1.0).abs() < 1e-12);
        }
    }
}
