//! Hardware classes and resource vectors.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Hardware platform a variant executes on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hardware {
    Cpu,
    Gpu,
    Accel,
}

impl Hardware {
    pub const ALL: [Hardware; 3] = [Hardware::Cpu, Hardware::Gpu, Hardware::Accel];

    /// The resource used to measure utilization and to bin-pack on this hardware.
    pub fn dominant_resource(self) -> ResourceKind {
        match self {
            Hardware::Cpu => ResourceKind::CpuCores,
            Hardware::Gpu => ResourceKind::GpuMemGb,
            Hardware::Accel => ResourceKind::AccelCores,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Hardware::Cpu => "cpu",
            Hardware::Gpu => "gpu",
            Hardware::Accel => "accel",
        }
    }

    fn index(self) -> usize {
        match self {
            Hardware::Cpu => 0,
            Hardware::Gpu => 1,
            Hardware::Accel => 2,
        }
    }
}

impl fmt::Display for Hardware {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Hardware {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cpu" => Ok(Hardware::Cpu),
            "gpu" => Ok(Hardware::Gpu),
            "accel" | "inferentia" => Ok(Hardware::Accel),
            other => Err(format!("unknown hardware `{other}`")),
        }
    }
}

/// A value per hardware class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerHardware<T> {
    pub cpu: T,
    pub gpu: T,
    pub accel: T,
}

impl<T> PerHardware<T> {
    pub fn from_fn(mut f: impl FnMut(Hardware) -> T) -> Self {
        Self {
            cpu: f(Hardware::Cpu),
            gpu: f(Hardware::Gpu),
            accel: f(Hardware::Accel),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Hardware, &T)> {
        Hardware::ALL.into_iter().map(move |h| (h, &self[h]))
    }
}

impl<T> Index<Hardware> for PerHardware<T> {
    type Output = T;

    fn index(&self, h: Hardware) -> &T {
        match h.index() {
            0 => &self.cpu,
            1 => &self.gpu,
            _ => &self.accel,
        }
    }
}

impl<T> IndexMut<Hardware> for PerHardware<T> {
    fn index_mut(&mut self, h: Hardware) -> &mut T {
        match h.index() {
            0 => &mut self.cpu,
            1 => &mut self.gpu,
            _ => &mut self.accel,
        }
    }
}

/// Resource types a variant can reserve on a worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    CpuCores,
    CpuMemGb,
    GpuMemGb,
    AccelCores,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 4] = [
        ResourceKind::CpuCores,
        ResourceKind::CpuMemGb,
        ResourceKind::GpuMemGb,
        ResourceKind::AccelCores,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::CpuCores => "cpu_cores",
            ResourceKind::CpuMemGb => "cpu_mem_gb",
            ResourceKind::GpuMemGb => "gpu_mem_gb",
            ResourceKind::AccelCores => "accel_cores",
        }
    }

    /// Hardware class a resource belongs to. Host memory counts as CPU.
    pub fn hardware(self) -> Hardware {
        match self {
            ResourceKind::CpuCores | ResourceKind::CpuMemGb => Hardware::Cpu,
            ResourceKind::GpuMemGb => Hardware::Gpu,
            ResourceKind::AccelCores => Hardware::Accel,
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ResourceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| format!("unknown resource type `{}`", s.trim()))
    }
}

/// Amounts of each resource type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Resources {
    pub cpu_cores: f64,
    pub cpu_mem_gb: f64,
    pub gpu_mem_gb: f64,
    pub accel_cores: f64,
}

// Absorbs float drift when summing and subtracting reservations.
const EPS: f64 = 1e-9;

impl Resources {
    pub const ZERO: Resources = Resources {
        cpu_cores: 0.0,
        cpu_mem_gb: 0.0,
        gpu_mem_gb: 0.0,
        accel_cores: 0.0,
    };

    pub fn get(&self, kind: ResourceKind) -> f64 {
        match kind {
            ResourceKind::CpuCores => self.cpu_cores,
            ResourceKind::CpuMemGb => self.cpu_mem_gb,
            ResourceKind::GpuMemGb => self.gpu_mem_gb,
            ResourceKind::AccelCores => self.accel_cores,
        }
    }

    pub fn set(&mut self, kind: ResourceKind, value: f64) {
        match kind {
            ResourceKind::CpuCores => self.cpu_cores = value,
            ResourceKind::CpuMemGb => self.cpu_mem_gb = value,
            ResourceKind::GpuMemGb => self.gpu_mem_gb = value,
            ResourceKind::AccelCores => self.accel_cores = value,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ResourceKind, f64)> + '_ {
        ResourceKind::ALL.into_iter().map(move |k| (k, self.get(k)))
    }

    /// Every component of `self` is at most the matching component of `capacity`.
    pub fn fits_within(&self, capacity: &Resources) -> bool {
        self.iter().all(|(k, v)| v <= capacity.get(k) + EPS)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.iter().all(|(_, v)| v >= -EPS)
    }

    /// True if the worker owning these totals has the given hardware at all.
    pub fn has(&self, hardware: Hardware) -> bool {
        self.get(hardware.dominant_resource()) > EPS
    }

    /// Component-wise subtraction clamped at zero.
    pub fn saturating_sub(&self, other: &Resources) -> Resources {
        let mut out = *self;
        for k in ResourceKind::ALL {
            out.set(k, (self.get(k) - other.get(k)).max(0.0));
        }
        out
    }
}

impl Add for Resources {
    type Output = Resources;

    fn add(mut self, rhs: Resources) -> Resources {
        self += rhs;
        self
    }
}

impl AddAssign for Resources {
    fn add_assign(&mut self, rhs: Resources) {
        for k in ResourceKind::ALL {
            self.set(k, self.get(k) + rhs.get(k));
        }
    }
}

impl Sub for Resources {
    type Output = Resources;

    fn sub(mut self, rhs: Resources) -> Resources {
        self -= rhs;
        self
    }
}

impl SubAssign for Resources {
    fn sub_assign(&mut self, rhs: Resources) {
        for k in ResourceKind::ALL {
            self.set(k, self.get(k) - rhs.get(k));
        }
    }
}

impl Mul<f64> for Resources {
    type Output = Resources;

    fn mul(self, rhs: f64) -> Resources {
        let mut out = self;
        for k in ResourceKind::ALL {
            out.set(k, self.get(k) * rhs);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_within_checks_every_component() {
        let cap = Resources {
            cpu_cores: 8.0,
            gpu_mem_gb: 16.0,
            ..Resources::ZERO
        };
        let ok = Resources {
            cpu_cores: 8.0,
            ..Resources::ZERO
        };
        let bad = Resources {
            accel_cores: 1.0,
            ..Resources::ZERO
        };
        assert!(ok.fits_within(&cap));
        assert!(!bad.fits_within(&cap));
        assert!(cap.has(Hardware::Gpu));
        assert!(!cap.has(Hardware::Accel));
    }

    #[test]
    fn parse_names_round_trip() {
        for k in ResourceKind::ALL {
            assert_eq!(k.as_str().parse::<ResourceKind>().unwrap(), k);
        }
        for h in Hardware::ALL {
            assert_eq!(h.as_str().parse::<Hardware>().unwrap(), h);
        }
        assert!("tpu".parse::<Hardware>().is_err());
    }
}
