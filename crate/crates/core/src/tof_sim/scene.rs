//! Scene description: an optional room plus spheres and boxes.
//!
//! Coordinates are camera-centred metres with `x` right, `y` down and `z`
//! along the optical axis. The camera and the light both sit at the origin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lambertian reflectance: `ir` is the albedo at the ToF wavelength, `rgb`
/// the visible colour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub ir: f64,
    pub rgb: [f64; 3],
}

impl Material {
    pub fn gray(albedo: f64) -> Self {
        Self {
            ir: albedo,
            rgb: [albedo; 3],
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.ir > 0.0 && self.ir <= 1.0) {
            return Err(Error::Domain(format!(
                "{what}: ir albedo {} outside (0, 1]",
                self.ir
            )));
        }
        if self.rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Domain(format!("{what}: rgb albedo outside [0, 1]")));
        }
        Ok(())
    }
}

/// Axis-aligned room. The wall at `z = min[2]` (behind the camera) is open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Left (`x = min`), right (`x = max`), floor (`y = max`), ceiling
    /// (`y = min`) and back (`z = max`) walls.
    pub walls: [Material; 5],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Object {
    Sphere {
        center: [f64; 3],
        radius: f64,
        material: Material,
    },
    Box {
        center: [f64; 3],
        /// Full edge lengths along x, y, z.
        size: [f64; 3],
        material: Material,
    },
}

impl Object {
    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Object::Sphere { center, radius, .. } => {
                let d: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d <= radius * radius
            }
            Object::Box { center, size, .. } => {
                (0..3).all(|i| (p[i] - center[i]).abs() <= size[i] / 2.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default)]
    pub room: Option<Room>,
    #[serde(default)]
    pub objects: Vec<Object>,
    /// Seeds the Monte-Carlo bounce sampling and sensor noise.
    #[serde(default)]
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let origin = [0.0; 3];
        if let Some(room) = &self.room {
            let finite = room.min.iter().chain(&room.max).all(|v| v.is_finite());
            if !finite || (0..3).any(|i| room.min[i] >= room.max[i]) {
                return Err(Error::Domain(
                    "room min must be below max on every axis".into(),
                ));
            }
            if (0..3).any(|i| !(room.min[i] < 0.0 && 0.0 < room.max[i])) {
                return Err(Error::Domain(
                    "camera must lie strictly inside the room".into(),
                ));
            }
            for (i, m) in room.walls.iter().enumerate() {
                m.validate(&format!("wall {i}"))?;
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            let what = format!("object {i}");
            match o {
                Object::Sphere {
                    center,
                    radius,
                    material,
                } => {
                    if !(radius.is_finite() && *radius > 0.0)
                        || center.iter().any(|v| !v.is_finite())
                    {
                        return Err(Error::Domain(format!("{what}: bad sphere geometry")));
                    }
                    material.validate(&what)?;
                }
                Object::Box {
                    center,
                    size,
                    material,
                } => {
                    let ok = size.iter().all(|s| s.is_finite() && *s > 0.0)
                        && center.iter().all(|v| v.is_finite());
                    if !ok {
                        return Err(Error::Domain(format!("{what}: bad box geometry")));
                    }
                    material.validate(&what)?;
                }
            }
            if o.contains(origin) {
                return Err(Error::Domain(format!("{what} encloses the camera")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// A large fronto-parallel slab whose front face lies at depth `distance`.
    pub fn wall(distance: f64, material: Material) -> Self {
        let thickness = 0.1;
        let extent = 100.0 * distance.max(1.0);
        Self {
            room: None,
            objects: vec![Object::Box {
                center: [0.0, 0.0, distance + thickness / 2.0],
                size: [extent, extent, thickness],
                material,
            }],
            seed: 0,
        }
    }

    /// An empty room with uniform walls.
    pub fn empty_room(min: [f64; 3], max: [f64; 3], material: Material, seed: u64) -> Self {
        Self {
            room: Some(Room {
                min,
                max,
                walls: [material; 5],
            }),
            objects: Vec::new(),
            seed,
        }
    }

    /// A desk-scale room with 3 to 8 random spheres and boxes, all within
    /// 6 m of the camera.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hx = rng.random_range(1.5..2.5);
        let hy = rng.random_range(1.0..1.5);
        let depth = rng.random_range(3.5..5.0);
        let material = |rng: &mut ChaCha8Rng, lo: f64| Material {
            ir: rng.random_range(lo..0.95),
            rgb: [
                rng.random_range(0.1..1.0),
                rng.random_range(0.1..1.0),
                rng.random_range(0.1..1.0),
            ],
        };
        let walls = [(); 5].map(|_| material(&mut rng, 0.3));
        let count = rng.random_range(3..=8);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let center = [
                rng.random_range(-(hx - 0.6)..(hx - 0.6)),
                rng.random_range(-(hy - 0.6)..(hy - 0.6)),
                rng.random_range(1.0..depth - 0.6),
            ];
            let m = material(&mut rng, 0.2);
            objects.push(if rng.random_bool(0.5) {
                Object::Sphere {
                    center,
                    radius: rng.random_range(0.15..0.5),
                    material: m,
                }
            } else {
                Object::Box {
                    center,
                    size: [
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                    ],
                    material: m,
                }
            });
        }
        Self {
            room: Some(Room {
                min: [-hx, -hy, -0.5],
                max: [hx, hy, depth],
                walls,
            }),
            objects,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_scenes_are_valid_and_deterministic() {
        for seed in 0..50 {
            let s = Scene::random(seed);
            s.validate().unwrap();
            assert_eq!(s, Scene::random(seed));
            assert!((3..=8).contains(&s.objects.len()));
        }
        assert_ne!(Scene::random(1), Scene::random(2));
    }

    #[test]
    fn json_round_trip() {
        let s = Scene::random(4);
        let back = Scene::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        let text = r#"{"objects":[{"kind":"sphere","center":[0,0,2],"radius":0.5,
            "material":{"ir":0.5,"rgb":[1,0,0]}}]}"#;
        let s = Scene::from_json(text).unwrap();
        assert!(s.room.is_none());
        assert_eq!(s.seed, 0);
    }

    #[test]
    fn rejects_bad_scenes() {
        let mut s = Scene::wall(2.0, Material::gray(0.0));
        assert!(s.validate().is_err());
        s = Scene::wall(2.0, Material::gray(0.5));
        s.objects.push(Object::Sphere {
            center: [0.0, 0.0, 0.1],
            radius: 0.5,
            material: Material::gray(0.5),
        });
        assert!(s.validate().is_err());
        let room = Scene::empty_room([0.5, -1.0, -1.0], [2.0, 1.0, 3.0], Material::gray(0.5), 0);
        assert!(room.validate().is_err());
    }
}
