//! Optical channel model: Lambertian line-of-sight gains and first-order
//! specular gains through a steerable mirror array.
//!
//! All gains are unitless DC channel gains. Negative cosine factors mark
//! geometrically impossible paths and yield a gain of exactly zero, as does
//! any incidence angle beyond the detector field of view.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distances below this are rejected as degenerate.
pub const MIN_DISTANCE: f64 = 1e-6;

/// Default lower bound on the LED half-power semi-angle (1 degree).
pub const DEFAULT_MIN_HALF_ANGLE: f64 = PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Ceiling-mounted LED access point.
#[derive(Debug, Clone, PartialEq)]
pub struct LedAp {
    pub position: Vec3,
    /// Half-power semi-angle in radians.
    pub half_power_angle: f64,
    /// Unit emission normal, straight down by default.
    pub normal: Vec3,
}

impl LedAp {
    pub fn new(position: Vec3, half_power_angle: f64) -> Self {
        Self {
            position,
            half_power_angle,
            normal: Vec3::new(0.0, 0.0, -1.0),
        }
    }
}

/// A single photodiode of a user terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoDetector {
    pub position: Vec3,
    pub normal: Vec3,
    /// Detector area in m².
    pub area: f64,
    /// Field-of-view semi-angle in radians.
    pub fov: f64,
    /// Responsivity in A/W.
    pub responsivity: f64,
    /// Optical filter gain applied to every path into this detector.
    pub filter_gain: f64,
}

impl PhotoDetector {
    /// Detector facing straight up.
    pub fn upward(position: Vec3, area: f64, fov: f64, responsivity: f64) -> Self {
        Self {
            position,
            normal: Vec3::new(0.0, 0.0, 1.0),
            area,
            fov,
            responsivity,
            filter_gain: 1.0,
        }
    }

    /// Normal from azimuth (from +x towards +y) and elevation (from the
    /// horizontal plane towards +z), both in radians.
    pub fn normal_from_az_el(azimuth: f64, elevation: f64) -> Vec3 {
        Vec3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        )
    }
}

/// A user terminal carrying one or more co-located photodetectors.
#[derive(Debug, Clone, PartialEq)]
pub struct UserTerminal {
    pub detectors: Vec<PhotoDetector>,
}

impl UserTerminal {
    pub fn position(&self) -> Vec3 {
        self.detectors[0].position
    }

    pub fn set_position(&mut self, p: Vec3) {
        for d in &mut self.detectors {
            d.position = p;
        }
    }
}

/// One steerable rectangular mirror of the reflecting array.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorElement {
    pub center: Vec3,
    pub width: f64,
    pub height: f64,
    pub reflectance: f64,
    /// Yaw angle in radians, within [-π/2, π/2].
    pub yaw: f64,
    /// Roll angle in radians, within [-π/2, π/2].
    pub roll: f64,
}

impl MirrorElement {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn normal(&self) -> Vec3 {
        mirror_normal(self.yaw, self.roll)
    }
}

/// Static geometry and device parameters of the room.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub room: Vec3,
    pub aps: Vec<LedAp>,
    pub mirrors: Vec<MirrorElement>,
    pub users: Vec<UserTerminal>,
    /// Lambertian order of each AP, derived from its half-power angle.
    pub lambertian_order: Vec<f64>,
}

impl Scene {
    /// Validates device placement and derives the Lambertian orders.
    pub fn new(
        room: Vec3,
        aps: Vec<LedAp>,
        mirrors: Vec<MirrorElement>,
        users: Vec<UserTerminal>,
    ) -> Result<Self> {
        if !(room.x > 0.0 && room.y > 0.0 && room.z > 0.0) || !room.is_finite() {
            return Err(Error::Domain {
                what: "room dimension",
                value: room.x.min(room.y).min(room.z),
            });
        }
        let inside = |p: Vec3| {
            p.is_finite()
                && (0.0..=room.x).contains(&p.x)
                && (0.0..=room.y).contains(&p.y)
                && (0.0..=room.z).contains(&p.z)
        };
        let mut lambertian = Vec::with_capacity(aps.len());
        for ap in &aps {
            if !inside(ap.position) {
                return Err(Error::Domain {
                    what: "AP position outside room",
                    value: ap.position.z,
                });
            }
            lambertian.push(lambertian_order(ap.half_power_angle)?);
        }
        for m in &mirrors {
            if !inside(m.center) {
                return Err(Error::Domain {
                    what: "mirror center outside room",
                    value: m.center.y,
                });
            }
            if !(m.reflectance > 0.0 && m.reflectance <= 1.0) {
                return Err(Error::Domain {
                    what: "mirror reflectance",
                    value: m.reflectance,
                });
            }
            if !(m.area() > 0.0) {
                return Err(Error::Domain {
                    what: "mirror area",
                    value: m.area(),
                });
            }
        }
        for u in &users {
            if u.detectors.is_empty() {
                return Err(Error::Domain {
                    what: "detector count",
                    value: 0.0,
                });
            }
            for d in &u.detectors {
                if !(d.area > 0.0) {
                    return Err(Error::Domain {
                        what: "detector area",
                        value: d.area,
                    });
                }
                if !(d.fov > 0.0 && d.fov <= PI / 2.0) {
                    return Err(Error::Domain {
                        what: "detector field of view",
                        value: d.fov,
                    });
                }
            }
            if !inside(u.position()) {
                return Err(Error::Domain {
                    what: "user position outside room",
                    value: u.position().x,
                });
            }
        }
        Ok(Self {
            room,
            aps,
            mirrors,
            users,
            lambertian_order: lambertian,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_aps(&self) -> usize {
        self.aps.len()
    }

    pub fn num_mirrors(&self) -> usize {
        self.mirrors.len()
    }
}

/// Per-user channel gains split by path type.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGains {
    /// K×L line-of-sight gains.
    pub los: Array2<f64>,
    /// K×M×L mirror-path gains.
    pub irs: Array3<f64>,
    /// Length-K combined gain per user.
    pub combined: Vec<f64>,
}

/// Lambertian emission order `-ln 2 / ln cos(φ½)`, rejecting half-angles
/// below one degree.
pub fn lambertian_order(half_power_angle: f64) -> Result<f64> {
    lambertian_order_with_min(half_power_angle, DEFAULT_MIN_HALF_ANGLE)
}

pub fn lambertian_order_with_min(half_power_angle: f64, min_angle: f64) -> Result<f64> {
    if !(half_power_angle >= min_angle && half_power_angle < PI / 2.0) {
        return Err(Error::Domain {
            what: "LED half-power semi-angle",
            value: half_power_angle,
        });
    }
    Ok(-(2f64.ln()) / half_power_angle.cos().ln())
}

fn checked_distance(v: Vec3, between: &'static str) -> Result<f64> {
    let d = v.norm();
    if !(d >= MIN_DISTANCE) {
        return Err(Error::DegenerateDistance { distance: d, between });
    }
    Ok(d)
}

fn within_fov(cos_incidence: f64, fov: f64) -> bool {
    cos_incidence >= 0.0 && cos_incidence.clamp(-1.0, 1.0).acos() <= fov
}

/// Direct-path gain from `ap` to `pd`.
pub fn los_gain(ap: &LedAp, pd: &PhotoDetector, n: f64) -> Result<f64> {
    let d = pd.position - ap.position;
    let dist = checked_distance(d, "AP and detector")?;
    let cos_irr = ap.normal.dot(d) / dist;
    let cos_inc = -pd.normal.dot(d) / dist;
    if cos_irr < 0.0 || !within_fov(cos_inc, pd.fov) {
        return Ok(0.0);
    }
    Ok(pd.filter_gain * (n + 1.0) * pd.area * cos_irr.powf(n) * cos_inc
        / (2.0 * PI * dist * dist))
}

/// Mirror normal for the given yaw and roll.
pub fn mirror_normal(yaw: f64, roll: f64) -> Vec3 {
    Vec3::new(yaw.sin() * roll.cos(), yaw.cos() * roll.cos(), roll.sin())
}

/// Cosine of the irradiance angle from mirror `m` towards a user at
/// `user_pos`, written out component by component.
pub fn cos_irradiance_mirror_user(m: &MirrorElement, user_pos: Vec3) -> Result<f64> {
    let dist = checked_distance(m.center - user_pos, "mirror and user")?;
    let (sy, cy) = m.yaw.sin_cos();
    let (sr, cr) = m.roll.sin_cos();
    Ok((m.center.x - user_pos.x) / dist * sy * cr
        + (m.center.y - user_pos.y) / dist * cy * cr
        + (m.center.z - user_pos.z) / dist * sr)
}

/// Cosine of the incidence angle at mirror `m` of light from an AP at
/// `ap_pos`. Negative when the AP is behind the mirror plane.
pub fn cos_incidence_mirror_ap(m: &MirrorElement, ap_pos: Vec3) -> Result<f64> {
    let d = ap_pos - m.center;
    let dist = checked_distance(d, "mirror and AP")?;
    Ok(m.normal().dot(d) / dist)
}

/// First-order gain of the path AP → mirror → detector.
pub fn irs_path_gain(ap: &LedAp, m: &MirrorElement, pd: &PhotoDetector, n: f64) -> Result<f64> {
    let ap_to_mirror = m.center - ap.position;
    let d_ml = checked_distance(ap_to_mirror, "AP and mirror")?;
    let mirror_minus_user = m.center - pd.position;
    let d_km = checked_distance(mirror_minus_user, "mirror and detector")?;

    let cos_emit = ap.normal.dot(ap_to_mirror) / d_ml;
    let cos_mirror_in = m.normal().dot(-ap_to_mirror) / d_ml;
    let cos_mirror_out = cos_irradiance_mirror_user(m, pd.position)?;
    let cos_detector = pd.normal.dot(mirror_minus_user) / d_km;

    if cos_emit < 0.0
        || cos_mirror_in < 0.0
        || cos_mirror_out < 0.0
        || !within_fov(cos_detector, pd.fov)
    {
        return Ok(0.0);
    }
    Ok(pd.filter_gain
        * (n + 1.0)
        * m.reflectance
        * pd.area
        * m.area()
        * cos_emit.powf(n)
        * cos_mirror_in
        * cos_mirror_out
        * cos_detector
        / (2.0 * PI * PI * d_ml * d_ml * d_km * d_km))
}

/// Fills all path gains for the scene. `blocked[(k, l)]` zeroes the direct
/// path from AP `l` to user `k`; mirror paths are never blocked. Each path
/// uses the user's best detector.
pub fn channel_matrix(scene: &Scene, blocked: Option<&Array2<bool>>) -> Result<ChannelGains> {
    let (k_n, l_n, m_n) = (scene.num_users(), scene.num_aps(), scene.num_mirrors());
    if let Some(mask) = blocked {
        if mask.dim() != (k_n, l_n) {
            return Err(Error::Dimension {
                what: "blockage mask",
                expected: k_n * l_n,
                got: mask.len(),
            });
        }
    }
    let mut los = Array2::zeros((k_n, l_n));
    let mut irs = Array3::zeros((k_n, m_n, l_n));
    let mut combined = vec![0.0; k_n];

    for (k, user) in scene.users.iter().enumerate() {
        for (l, ap) in scene.aps.iter().enumerate() {
            if blocked.is_some_and(|mask| mask[(k, l)]) {
                continue;
            }
            let n = scene.lambertian_order[l];
            let mut best = 0.0f64;
            for pd in &user.detectors {
                best = best.max(los_gain(ap, pd, n)?);
            }
            los[(k, l)] = best;
        }
        for (m, mirror) in scene.mirrors.iter().enumerate() {
            for (l, ap) in scene.aps.iter().enumerate() {
                let n = scene.lambertian_order[l];
                let mut best = 0.0f64;
                for pd in &user.detectors {
                    best = best.max(irs_path_gain(ap, mirror, pd, n)?);
                }
                irs[(k, m, l)] = best;
            }
        }
        let mut h = 0.0;
        for l in 0..l_n {
            h += los[(k, l)];
        }
        for m in 0..m_n {
            for l in 0..l_n {
                h += irs[(k, m, l)];
            }
        }
        combined[k] = h;
    }
    Ok(ChannelGains { los, irs, combined })
}
