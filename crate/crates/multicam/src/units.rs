//! Canonical scaling: length `a_p`, unit gravitational parameter.

use serde::{Deserialize, Serialize};

pub const MU_EARTH: f64 = 398_600.441_8; // km^3/s^2
pub const R_EARTH: f64 = 6_378.137; // km
pub const J2_EARTH: f64 = 1.082_626_68e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Length,
    Velocity,
    Time,
    Acceleration,
}

impl std::str::FromStr for Kind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "length" => Ok(Kind::Length),
            "velocity" => Ok(Kind::Velocity),
            "time" => Ok(Kind::Time),
            "acceleration" => Ok(Kind::Acceleration),
            other => Err(format!("unknown quantity kind '{other}'")),
        }
    }
}

/// Reference quantities in km, km/s, s and km/s^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length: f64,
    pub velocity: f64,
    pub time: f64,
    pub acceleration: f64,
}

impl Units {
    pub fn from_semi_major_axis(a_km: f64) -> Units {
        Units {
            length: a_km,
            velocity: (MU_EARTH / a_km).sqrt(),
            time: (a_km.powi(3) / MU_EARTH).sqrt(),
            acceleration: MU_EARTH / (a_km * a_km),
        }
    }

    fn reference(&self, kind: Kind) -> f64 {
        match kind {
            Kind::Length => self.length,
            Kind::Velocity => self.velocity,
            Kind::Time => self.time,
            Kind::Acceleration => self.acceleration,
        }
    }

    pub fn scale(&self, value: f64, kind: Kind) -> f64 {
        value / self.reference(kind)
    }

    pub fn unscale(&self, value: f64, kind: Kind) -> f64 {
        value * self.reference(kind)
    }

    /// Scaled state from km and km/s.
    pub fn scale_state(&self, x: &[f64; 6]) -> [f64; 6] {
        let mut o = [0.0; 6];
        for i in 0..3 {
            o[i] = x[i] / self.length;
            o[i + 3] = x[i + 3] / self.velocity;
        }
        o
    }

    pub fn unscale_state(&self, x: &[f64; 6]) -> [f64; 6] {
        let mut o = [0.0; 6];
        for i in 0..3 {
            o[i] = x[i] * self.length;
            o[i + 3] = x[i + 3] * self.velocity;
        }
        o
    }

    /// Scales a 6×6 covariance in km², km²/s, km²/s² units.
    pub fn scale_cov6(&self, p: &nalgebra::Matrix6<f64>) -> nalgebra::Matrix6<f64> {
        let s = nalgebra::Vector6::new(
            1.0 / self.length,
            1.0 / self.length,
            1.0 / self.length,
            1.0 / self.velocity,
            1.0 / self.velocity,
            1.0 / self.velocity,
        );
        let d = nalgebra::Matrix6::from_diagonal(&s);
        d * p * d
    }

    /// Acceleration in mm/s² to scaled units.
    pub fn accel_from_mm_s2(&self, a: f64) -> f64 {
        a * 1e-6 / self.acceleration
    }

    pub fn accel_to_mm_s2(&self, a: f64) -> f64 {
        a * self.acceleration * 1e6
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_quantities_scale_to_unity() {
        let u = Units::from_semi_major_axis(6928.0);
        assert_eq!(u.scale(6928.0, Kind::Length), 1.0);
        let vc = (MU_EARTH / 6928.0).sqrt();
        assert!((u.scale(vc, Kind::Velocity) - 1.0).abs() < 1e-15);
        let period = 2.0 * std::f64::consts::PI * (6928.0f64.powi(3) / MU_EARTH).sqrt();
        assert!((u.scale(period, Kind::Time) - 2.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn round_trip() {
        let u = Units::from_semi_major_axis(6800.0);
        for kind in [Kind::Length, Kind::Velocity, Kind::Time, Kind::Acceleration] {
            let v = 123.456;
            let back = u.unscale(u.scale(v, kind), kind);
            assert!(((back - v) / v).abs() < 1e-14);
        }
        assert!("speed".parse::<Kind>().is_err());
    }
}
