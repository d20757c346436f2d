use super::Vec3;

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow(p);
        }
        b
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.extent().norm()
        }
    }

    /// Box scaled about its center.
    pub fn scaled(&self, factor: f64) -> Aabb {
        let c = self.center();
        let h = self.extent() * (0.5 * factor);
        Aabb { min: c - h, max: c + h }
    }

    pub fn longest_axis(&self) -> usize {
        self.extent().imax()
    }

    /// Squared distance from `p` to the box (zero inside).
    pub fn distance_squared(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.min[k] {
                self.min[k] - p[k]
            } else if p[k] > self.max[k] {
                p[k] - self.max[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }

    /// Slab test. Returns the parametric entry/exit interval clipped to
    /// `[t_min, t_max]`, or `None` on a miss. The box is padded by `1e-9`
    /// relative to its diagonal so rays grazing a face still register.
    pub fn ray_interval(&self, origin: &Vec3, inv_dir: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, f64)> {
        let pad = 1e-9 * (1.0 + self.diagonal());
        let mut t0 = t_min;
        let mut t1 = t_max;
        for k in 0..3 {
            let lo = (self.min[k] - pad - origin[k]) * inv_dir[k];
            let hi = (self.max[k] + pad - origin[k]) * inv_dir[k];
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            // NaN arises for 0 * inf when the origin lies on a slab boundary
            // of a zero direction component; treat as unconstrained.
            if lo.is_finite() || lo == f64::NEG_INFINITY {
                t0 = t0.max(lo);
            }
            if hi.is_finite() || hi == f64::INFINITY {
                t1 = t1.min(hi);
            }
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}
