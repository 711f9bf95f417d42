use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{splitmix64, ScenarioKind, SimConfig};
use crate::geometry::Pose;

use super::SimError;

/// A textured rectangle in space. `e1`/`e2` are orthonormal in-plane axes;
/// texture coordinates are meters along them from the center.
#[derive(Debug, Clone)]
pub struct Plane {
    pub center: Vector3<f64>,
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub normal: Vector3<f64>,
    /// Seed of the procedural intensity function.
    pub texture_seed: u64,
    /// Texture contrast; near zero renders the surface almost constant.
    pub amplitude: f64,
}

/// A stable scene point stamped onto a surface with a high-contrast square so
/// that the spot is visually distinctive.
#[derive(Debug, Clone)]
pub struct LandmarkSeed {
    pub id: u64,
    pub plane: usize,
    /// In-plane coordinates (meters from plane center).
    pub uv: [f64; 2],
    pub world: Vector3<f64>,
    pub bright: bool,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub planes: Vec<Plane>,
    pub seeds: Vec<LandmarkSeed>,
    /// Intensity returned for rays that miss every surface.
    pub background: f64,
    /// Half-side of the landmark stamps in meters.
    pub stamp_half: f64,
    /// Spatial buckets of stamp indices per plane, so the per-pixel intensity
    /// lookup stays O(1) in the seed count.
    stamp_index: std::collections::HashMap<(usize, i64, i64), Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryScript {
    pub poses: Vec<Pose>,
    pub frame_rate: f64,
    pub kind: ScenarioKind,
}

impl TrajectoryScript {
    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RayHit {
    pub plane: usize,
    /// Ray parameter; equals camera-frame depth when the direction has unit
    /// z in camera coordinates.
    pub t: f64,
    pub a: f64,
    pub b: f64,
}

/// Nearest ray/plane intersection in front of the origin.
pub fn raycast(scene: &Scene, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for (idx, plane) in scene.planes.iter().enumerate() {
        let denom = dir.dot(&plane.normal);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = (plane.center - origin).dot(&plane.normal) / denom;
        if t <= 0.05 {
            continue;
        }
        if let Some(hit) = &best {
            if t >= hit.t {
                continue;
            }
        }
        let p = origin + dir * t;
        let rel = p - plane.center;
        let a = rel.dot(&plane.e1);
        let b = rel.dot(&plane.e2);
        if a.abs() <= plane.half_u && b.abs() <= plane.half_v {
            best = Some(RayHit { plane: idx, t, a, b });
        }
    }
    best
}

impl Scene {
    fn bucket_size(&self) -> f64 {
        self.stamp_half * 4.0
    }

    pub(crate) fn build_index(
        planes: Vec<Plane>,
        seeds: Vec<LandmarkSeed>,
        background: f64,
        stamp_half: f64,
    ) -> Scene {
        let mut scene = Scene {
            planes,
            seeds,
            background,
            stamp_half,
            stamp_index: std::collections::HashMap::new(),
        };
        let cell = scene.bucket_size();
        for (idx, seed) in scene.seeds.iter().enumerate() {
            let lo_a = ((seed.uv[0] - stamp_half) / cell).floor() as i64;
            let hi_a = ((seed.uv[0] + stamp_half) / cell).floor() as i64;
            let lo_b = ((seed.uv[1] - stamp_half) / cell).floor() as i64;
            let hi_b = ((seed.uv[1] + stamp_half) / cell).floor() as i64;
            for ca in lo_a..=hi_a {
                for cb in lo_b..=hi_b {
                    scene
                        .stamp_index
                        .entry((seed.plane, ca, cb))
                        .or_default()
                        .push(idx as u32);
                }
            }
        }
        scene
    }

    /// Surface intensity at in-plane coordinates `(a, b)` of `plane`.
    ///
    /// `footprint` is the sampling footprint in meters (one pixel projected
    /// onto the surface); stamp edges are band-limited to that width so a
    /// point-sampling renderer produces clean subpixel-consistent edges.
    /// Pass 0 for the ideal (hard-edged) surface function.
    pub fn intensity(&self, plane: usize, a: f64, b: f64, footprint: f64) -> f64 {
        let p = &self.planes[plane];
        let noise = octave_noise(p.texture_seed, a, b);
        let base = (0.5 + p.amplitude * (noise - 0.5)).clamp(0.0, 1.0);
        let ramp = footprint.max(1e-9);
        let cell = self.bucket_size();
        let key = (plane, (a / cell).floor() as i64, (b / cell).floor() as i64);
        if let Some(candidates) = self.stamp_index.get(&key) {
            for &idx in candidates {
                let seed = &self.seeds[idx as usize];
                let da = self.stamp_half - (a - seed.uv[0]).abs();
                let db = self.stamp_half - (b - seed.uv[1]).abs();
                if da < -ramp || db < -ramp {
                    continue;
                }
                let cov_a = ((da / ramp + 0.5).clamp(0.0, 1.0)).min(1.0);
                let cov_b = ((db / ramp + 0.5).clamp(0.0, 1.0)).min(1.0);
                let coverage = cov_a * cov_b;
                if coverage > 0.0 {
                    let stamp = if seed.bright { 0.95 } else { 0.05 };
                    return base + (stamp - base) * coverage;
                }
            }
        }
        base
    }
}

fn lattice_value(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(seed ^ (ix as u64).wrapping_mul(0x9E37_79B9) ^ (iy as u64).wrapping_mul(0x85EB_CA6B));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let ix = x.floor() as i64;
    let iy = y.floor() as i64;
    let fx = smoothstep(x - ix as f64);
    let fy = smoothstep(y - iy as f64);
    let v00 = lattice_value(seed, ix, iy);
    let v10 = lattice_value(seed, ix + 1, iy);
    let v01 = lattice_value(seed, ix, iy + 1);
    let v11 = lattice_value(seed, ix + 1, iy + 1);
    (1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10 + (1.0 - fx) * fy * v01 + fx * fy * v11
}

/// Four octaves of value noise; the finest octave has a wavelength of
/// roughly ten pixels at the nominal viewing distance, giving dense
/// gradients without starving the corner detector.
fn octave_noise(seed: u64, a: f64, b: f64) -> f64 {
    let mut sum = 0.0;
    let mut amp = 0.5;
    let mut freq = 1.5;
    let mut total = 0.0;
    for octave in 0..4 {
        sum += amp * value_noise(seed.wrapping_add(octave), a * freq + 31.7, b * freq - 17.3);
        total += amp;
        amp *= 0.55;
        freq *= 2.3;
    }
    sum / total
}

/// Camera orientation: +z optical axis toward `forward`, +y down, world up
/// is +z. Returns world-from-camera rotation.
fn look_rotation(forward: &Vector3<f64>) -> UnitQuaternion<f64> {
    let f = forward.normalize();
    let world_up = Vector3::new(0.0, 0.0, 1.0);
    let mut right = f.cross(&world_up);
    if right.norm() < 1e-9 {
        right = Vector3::new(1.0, 0.0, 0.0);
    } else {
        right = right.normalize();
    }
    let down = f.cross(&right);
    let r = nalgebra::Matrix3::from_columns(&[right, down, f]);
    UnitQuaternion::from_matrix(&r)
}

fn room_planes(half_x: f64, half_y: f64, height: f64, rng: &mut ChaCha8Rng) -> Vec<Plane> {
    let mk = |center: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>, hu: f64, hv: f64, seed| {
        Plane {
            center,
            e1,
            e2,
            half_u: hu,
            half_v: hv,
            normal: e1.cross(&e2),
            texture_seed: seed,
            amplitude: 0.85,
        }
    };
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    vec![
        // +x, +y, -x, -y walls, floor, ceiling
        mk(Vector3::new(half_x, 0.0, height / 2.0), y, z, half_y, height / 2.0, rng.random()),
        mk(Vector3::new(0.0, half_y, height / 2.0), x, z, half_x, height / 2.0, rng.random()),
        mk(Vector3::new(-half_x, 0.0, height / 2.0), y, z, half_y, height / 2.0, rng.random()),
        mk(Vector3::new(0.0, -half_y, height / 2.0), x, z, half_x, height / 2.0, rng.random()),
        mk(Vector3::new(0.0, 0.0, 0.0), x, y, half_x, half_y, rng.random()),
        mk(Vector3::new(0.0, 0.0, height), x, y, half_x, half_y, rng.random()),
    ]
}

fn corridor_planes(length: f64, rng: &mut ChaCha8Rng) -> Vec<Plane> {
    let mk = |center: Vector3<f64>, e1: Vector3<f64>, e2: Vector3<f64>, hu: f64, hv: f64, seed| {
        Plane {
            center,
            e1,
            e2,
            half_u: hu,
            half_v: hv,
            normal: e1.cross(&e2),
            texture_seed: seed,
            amplitude: 0.85,
        }
    };
    let x = Vector3::x();
    let y = Vector3::y();
    let z = Vector3::z();
    let half = length / 2.0;
    vec![
        mk(Vector3::new(0.0, 1.5, 1.25), x, z, half, 1.25, rng.random()),
        mk(Vector3::new(0.0, -1.5, 1.25), x, z, half, 1.25, rng.random()),
        mk(Vector3::new(0.0, 0.0, 0.0), x, y, half, 1.5, rng.random()),
        mk(Vector3::new(0.0, 0.0, 2.5), x, y, half, 1.5, rng.random()),
        mk(Vector3::new(half, 0.0, 1.25), y, z, 1.5, 1.25, rng.random()),
        mk(Vector3::new(-half, 0.0, 1.25), y, z, 1.5, 1.25, rng.random()),
    ]
}

fn scatter_seeds(
    planes: &[Plane],
    count: usize,
    stamp_half: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<LandmarkSeed> {
    let total_area: f64 = planes.iter().map(|p| p.half_u * p.half_v).sum();
    let mut seeds = Vec::with_capacity(count);
    let mut id = 0u64;
    for (idx, plane) in planes.iter().enumerate() {
        let share =
            ((plane.half_u * plane.half_v / total_area) * count as f64).round() as usize;
        for _ in 0..share {
            let margin = stamp_half * 2.0;
            let a = rng.random_range(-(plane.half_u - margin)..(plane.half_u - margin));
            let b = rng.random_range(-(plane.half_v - margin)..(plane.half_v - margin));
            let world = plane.center + plane.e1 * a + plane.e2 * b;
            seeds.push(LandmarkSeed {
                id,
                plane: idx,
                uv: [a, b],
                world,
                bright: rng.random_bool(0.5),
            });
            id += 1;
        }
    }
    seeds
}

/// Builds a deterministic scene/trajectory pair for the scenario kind.
///
/// Loop scenarios close on themselves (final pose within 0.01 m of the
/// first); texture-deprived ones face near-constant walls through the middle
/// of the sequence.
pub fn generate_scenario(
    kind: ScenarioKind,
    seed: u64,
    n_frames: usize,
    cfg: &SimConfig,
) -> Result<(Scene, TrajectoryScript), SimError> {
    if n_frames < 2 {
        return Err(SimError::TooFewFrames(n_frames));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xC0FF_EE00));
    let stamp_half = 0.045;

    let (mut planes, poses) = match kind {
        ScenarioKind::Loop | ScenarioKind::TextureDeprived => {
            let planes = room_planes(5.0, 5.0, 3.0, &mut rng);
            let max_radius = cfg.max_step * (n_frames as f64 - 1.0) / (2.0 * std::f64::consts::PI);
            let radius = 2.8f64.min(max_radius);
            let pitch_up: f64 = if kind == ScenarioKind::TextureDeprived {
                0.21
            } else {
                0.0
            };
            let poses = (0..n_frames)
                .map(|i| {
                    let theta = 2.0 * std::f64::consts::PI * i as f64 / (n_frames as f64 - 1.0);
                    let pos = Vector3::new(radius * theta.cos(), radius * theta.sin(), 1.5);
                    let forward = Vector3::new(
                        theta.cos() * pitch_up.cos(),
                        theta.sin() * pitch_up.cos(),
                        pitch_up.sin(),
                    );
                    Pose::new(look_rotation(&forward), pos)
                })
                .collect();
            (planes, poses)
        }
        ScenarioKind::SmallRoom => {
            let planes = room_planes(2.0, 2.0, 2.5, &mut rng);
            let max_radius = cfg.max_step * (n_frames as f64 - 1.0) / (2.0 * std::f64::consts::PI);
            let radius = 0.7f64.min(max_radius);
            let poses = (0..n_frames)
                .map(|i| {
                    let theta = 2.0 * std::f64::consts::PI * i as f64 / (n_frames as f64 - 1.0);
                    let pos = Vector3::new(radius * theta.cos(), radius * theta.sin(), 1.25);
                    let forward = Vector3::new(theta.cos(), theta.sin(), 0.0);
                    Pose::new(look_rotation(&forward), pos)
                })
                .collect();
            (planes, poses)
        }
        ScenarioKind::Exploration => {
            let step = cfg.max_step.min(0.04);
            let length = step * n_frames as f64 + 8.0;
            let planes = corridor_planes(length, &mut rng);
            let x0 = -length / 2.0 + 2.0;
            let poses = (0..n_frames)
                .map(|i| {
                    let x = x0 + step * i as f64;
                    let yaw = 0.45 * (2.0 * std::f64::consts::PI * i as f64 / 140.0).sin();
                    let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
                    Pose::new(look_rotation(&forward), Vector3::new(x, 0.0, 1.25))
                })
                .collect();
            (planes, poses)
        }
    };

    if kind == ScenarioKind::TextureDeprived {
        // Flatten a contiguous arc of surfaces. The camera faces the +y and
        // -x walls through the middle of the loop, so those go first; the
        // ceiling follows since the pitched-up view grazes it throughout.
        let n_deprived =
            ((planes.len() as f64) * cfg.deprived_fraction).round() as usize;
        planes[1].amplitude = 0.004;
        planes[2].amplitude = 0.004;
        if n_deprived > 2 {
            planes[5].amplitude = 0.004;
        }
    }

    let deprived: Vec<usize> = planes
        .iter()
        .enumerate()
        .filter(|(_, p)| p.amplitude < 0.01)
        .map(|(i, _)| i)
        .collect();
    let mut seeds = scatter_seeds(&planes, cfg.landmark_seeds, stamp_half, &mut rng);
    // Deprived surfaces carry no stamps either; that is the point of them.
    seeds.retain(|s| !deprived.contains(&s.plane));
    for (fresh, seed) in seeds.iter_mut().enumerate() {
        seed.id = fresh as u64;
    }

    let scene = Scene::build_index(planes, seeds, cfg.background_intensity, stamp_half);
    let script = TrajectoryScript {
        poses,
        frame_rate: cfg.frame_rate,
        kind,
    };
    Ok((scene, script))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn loop_scenario_closes() {
        let (_, script) =
            generate_scenario(ScenarioKind::Loop, 7, 400, &cfg()).unwrap();
        let start = script.poses[0].translation();
        let end = script.poses[script.poses.len() - 1].translation();
        assert!((start - end).norm() < 0.01);
    }

    #[test]
    fn generation_is_deterministic() {
        let (s1, t1) = generate_scenario(ScenarioKind::Loop, 7, 50, &cfg()).unwrap();
        let (s2, t2) = generate_scenario(ScenarioKind::Loop, 7, 50, &cfg()).unwrap();
        assert_eq!(s1.seeds.len(), s2.seeds.len());
        for (a, b) in s1.seeds.iter().zip(s2.seeds.iter()) {
            assert_eq!(a.world, b.world);
        }
        for (a, b) in t1.poses.iter().zip(t2.poses.iter()) {
            assert_eq!(a.translation(), b.translation());
        }
    }

    #[test]
    fn step_size_respects_max() {
        for kind in [
            ScenarioKind::Loop,
            ScenarioKind::Exploration,
            ScenarioKind::TextureDeprived,
            ScenarioKind::SmallRoom,
        ] {
            let (_, script) = generate_scenario(kind, 3, 120, &cfg()).unwrap();
            for w in script.poses.windows(2) {
                let d = (w[1].translation() - w[0].translation()).norm();
                assert!(d <= cfg().max_step + 1e-9, "{kind}: step {d}");
            }
        }
    }

    #[test]
    fn too_few_frames_errors() {
        assert!(generate_scenario(ScenarioKind::Loop, 1, 1, &cfg()).is_err());
    }

    #[test]
    fn seeds_lie_on_their_planes() {
        let (scene, _) = generate_scenario(ScenarioKind::SmallRoom, 5, 10, &cfg()).unwrap();
        for seed in &scene.seeds {
            let plane = &scene.planes[seed.plane];
            let off = (seed.world - plane.center).dot(&plane.normal);
            assert_relative_eq!(off, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn look_rotation_is_orthonormal_and_right_handed() {
        let r = look_rotation(&Vector3::new(1.0, 0.3, -0.1));
        let m = r.to_rotation_matrix().into_inner();
        assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(
            (m.transpose() * m - nalgebra::Matrix3::identity()).norm(),
            0.0,
            epsilon = 1e-9
        );
    }
}
