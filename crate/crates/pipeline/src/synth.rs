//! Procedural two-modality crowd scenes with ground-truth density maps.
//!
//! Modality a is a visible-light render: heads are coloured blobs over a
//! smooth texture, and dark scenes scale it down and bury it in noise.
//! Modality b is a thermal-like render: heads are always at full contrast
//! but warm clutter adds head-sized spurious blobs. Bright scenes carry heavy
//! clutter and dark scenes little, so each modality is reliable where the
//! other is not.

use std::fmt;

use csca_core::{Error, Result, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Illumination {
    Bright,
    Dark,
}

impl Illumination {
    pub fn name(self) -> &'static str {
        match self {
            Illumination::Bright => "bright",
            Illumination::Dark => "dark",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bright" => Some(Illumination::Bright),
            "dark" => Some(Illumination::Dark),
            _ => None,
        }
    }
}

impl fmt::Display for Illumination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Head {
    pub x: f64,
    pub y: f64,
    /// blob standard deviation in pixels
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub heads: Vec<Head>,
    pub illumination: Illumination,
    /// in `[0, 1]`
    pub clutter: f64,
}

/// Knobs of the scene generator and renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub min_heads: usize,
    pub max_heads: usize,
    pub head_size: (f64, f64),
    /// minimum centre distance between heads
    pub min_spacing: f64,
    /// spurious thermal blobs at clutter 1
    pub max_spurious: usize,
    pub bright_clutter: (f64, f64),
    pub dark_clutter: (f64, f64),
    pub texture_amplitude: f64,
    pub dark_gain: f64,
    pub dark_noise: f64,
    pub thermal_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            min_heads: 2,
            max_heads: 14,
            head_size: (0.8, 1.4),
            min_spacing: 4.5,
            max_spurious: 8,
            bright_clutter: (0.5, 1.0),
            dark_clutter: (0.0, 0.2),
            texture_amplitude: 0.1,
            dark_gain: 0.1,
            dark_noise: 0.2,
            thermal_noise: 0.02,
        }
    }
}

fn sample_positions<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    h: usize,
    w: usize,
    spacing: f64,
    avoid: &[Head],
) -> Vec<(f64, f64)> {
    let margin = 1.0;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count && tries < 10_000 {
        tries += 1;
        let x = rng.gen_range(margin..(w as f64 - margin).max(margin + 1e-9));
        let y = rng.gen_range(margin..(h as f64 - margin).max(margin + 1e-9));
        let far = |px: f64, py: f64| (px - x).hypot(py - y) >= spacing;
        if out.iter().all(|&(px, py)| far(px, py)) && avoid.iter().all(|hd| far(hd.x, hd.y)) {
            out.push((x, y));
        }
    }
    out
}

/// A random scene; the head count may fall short of the draw when the
/// spacing constraint cannot be met, the returned scene is always exact.
pub fn generate_scene<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    illumination: Illumination,
    p: &SynthParams,
) -> Scene {
    let count = rng.gen_range(p.min_heads..=p.max_heads);
    let heads = sample_positions(rng, count, height, width, p.min_spacing, &[])
        .into_iter()
        .map(|(x, y)| Head {
            x,
            y,
            size: rng.gen_range(p.head_size.0..=p.head_size.1),
        })
        .collect();
    let range = match illumination {
        Illumination::Bright => p.bright_clutter,
        Illumination::Dark => p.dark_clutter,
    };
    Scene {
        height,
        width,
        heads,
        illumination,
        clutter: rng.gen_range(range.0..=range.1),
    }
}

fn add_blob(plane: &mut [f64], w: usize, x: f64, y: f64, size: f64, amp: f64) {
    let h = plane.len() / w;
    let r = (4.0 * size).ceil() as isize;
    let (cx, cy) = (x.floor() as isize, y.floor() as isize);
    let inv = 1.0 / (2.0 * size * size);
    for py in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
        for px in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
            let dx = px as f64 + 0.5 - x;
            let dy = py as f64 + 0.5 - y;
            plane[py as usize * w + px as usize] += amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// Both modality renders, `C×H×W` each, plus the list of spurious blobs.
#[derive(Clone, Debug)]
pub struct Render {
    pub mod_a: Tensor<f32>,
    pub mod_b: Tensor<f32>,
    pub spurious: Vec<Head>,
}

const HEAD_COLOUR: [f64; 3] = [1.0, 0.8, 0.6];

/// Renders a scene. With `noisy = false` neither modality gets additive noise
/// or the dark-scene attenuation noise, which leaves blob maxima exact.
pub fn render<R: Rng + ?Sized>(
    scene: &Scene,
    channels: usize,
    p: &SynthParams,
    noisy: bool,
    rng: &mut R,
) -> Render {
    let (h, w) = (scene.height, scene.width);
    let n = h * w;

    // visible modality
    let mut a = vec![0.0f64; channels * n];
    for c in 0..channels {
        let fx = rng.gen_range(0.05..0.2);
        let fy = rng.gen_range(0.05..0.2);
        let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
        let plane = &mut a[c * n..(c + 1) * n];
        for (i, v) in plane.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            *v = p.texture_amplitude * (0.5 + 0.5 * (fx * x + px).sin() * (fy * y + py).cos());
        }
        let amp = HEAD_COLOUR[c % HEAD_COLOUR.len()];
        for hd in &scene.heads {
            add_blob(plane, w, hd.x, hd.y, hd.size, amp);
        }
    }
    if scene.illumination == Illumination::Dark {
        for v in &mut a {
            *v *= p.dark_gain;
            if noisy {
                *v += p.dark_noise * normal(rng);
            }
        }
    }

    // thermal modality
    let spurious_n = (scene.clutter * p.max_spurious as f64).round() as usize;
    let spurious: Vec<Head> = sample_positions(rng, spurious_n, h, w, 2.0, &scene.heads)
        .into_iter()
        .map(|(x, y)| Head {
            x,
            y,
            size: rng.gen_range(p.head_size.0..=p.head_size.1 + 0.4),
        })
        .collect();
    let mut base = vec![0.0f64; n];
    for hd in &scene.heads {
        add_blob(&mut base, w, hd.x, hd.y, hd.size, 1.0);
    }
    for s in &spurious {
        let amp = rng.gen_range(0.7..1.0);
        add_blob(&mut base, w, s.x, s.y, s.size, amp);
    }
    let mut b = vec![0.0f64; channels * n];
    for c in 0..channels {
        for i in 0..n {
            let noise = if noisy { p.thermal_noise * normal(rng) } else { 0.0 };
            b[c * n + i] = base[i] + noise;
        }
    }

    let to_t = |v: Vec<f64>| {
        Tensor::new(vec![channels, h, w], v.into_iter().map(|x| x as f32).collect()).expect("render shape")
    };
    Render {
        mod_a: to_t(a),
        mod_b: to_t(b),
        spurious,
    }
}

/// Ground-truth density: one unit-mass Gaussian of width `sigma` (scene
/// pixels) per head, truncated at 3σ and renormalised after border clipping,
/// then sum-pooled onto `out` extents so every head still carries mass one.
pub fn density_from_heads(scene: &Scene, sigma: f64, out: (usize, usize)) -> Result<Tensor<f32>> {
    let (h, w) = (scene.height, scene.width);
    let (oh, ow) = out;
    if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
        return Err(Error::Config(format!(
            "density extents {oh}×{ow} must divide scene extents {h}×{w}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let mut full = vec![0.0f64; h * w];
    let r = (3.0 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut kernel = Vec::new();
    for hd in &scene.heads {
        kernel.clear();
        let (cx, cy) = (hd.x.floor() as isize, hd.y.floor() as isize);
        let mut mass = 0.0;
        for py in (cy - r).max(0)..=(cy + r).min(h as isize - 1) {
            for px in (cx - r).max(0)..=(cx + r).min(w as isize - 1) {
                let dx = px as f64 + 0.5 - hd.x;
                let dy = py as f64 + 0.5 - hd.y;
                let d2 = dx * dx + dy * dy;
                if d2 <= 9.0 * sigma * sigma {
                    let v = (-d2 * inv).exp();
                    mass += v;
                    kernel.push((py as usize * w + px as usize, v));
                }
            }
        }
        if mass > 0.0 {
            for &(i, v) in &kernel {
                full[i] += v / mass;
            }
        } else {
            // a head whose 3σ disc misses every pixel centre keeps its mass
            let i = (hd.y.floor() as usize).min(h - 1) * w + (hd.x.floor() as usize).min(w - 1);
            full[i] += 1.0;
        }
    }
    let (sy, sx) = (h / oh, w / ow);
    let mut pooled = vec![0.0f64; oh * ow];
    for y in 0..h {
        for x in 0..w {
            pooled[(y / sy) * ow + x / sx] += full[y * w + x];
        }
    }
    Tensor::new(vec![oh, ow], pooled.into_iter().map(|v| v as f32).collect())
}

/// Strict local maxima above `threshold` in one channel of a render; ties are
/// broken towards the earlier pixel so a plateau counts once.
pub fn count_local_maxima(map: &Tensor<f32>, channel: usize, threshold: f32) -> usize {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let plane = &map.data()[channel * h * w..(channel + 1) * h * w];
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            let v = plane[y * w + x];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let u = plane[ny as usize * w + nx as usize];
                    let earlier = (ny, nx) < (y as isize, x as isize);
                    if u > v || (earlier && u == v) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                n += 1;
            }
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(heads: Vec<Head>) -> Scene {
        Scene {
            height: 32,
            width: 32,
            heads,
            illumination: Illumination::Bright,
            clutter: 0.0,
        }
    }

    #[test]
    fn density_mass_equals_head_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SynthParams::default();
        for illum in [Illumination::Bright, Illumination::Dark] {
            let s = generate_scene(&mut rng, 32, 32, illum, &p);
            let d = density_from_heads(&s, 2.0, (8, 8)).unwrap();
            let total: f64 = d.data().iter().map(|&v| v as f64).sum();
            assert!((total - s.heads.len() as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn corner_head_keeps_unit_mass() {
        let s = scene(vec![Head { x: 0.1, y: 0.2, size: 1.0 }]);
        let d = density_from_heads(&s, 2.0, (32, 32)).unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-6);
        assert!(density_from_heads(&s, 2.0, (5, 5)).is_err());
    }

    #[test]
    fn clean_bright_scene_has_one_maximum_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SynthParams::default();
        for _ in 0..20 {
            let mut s = generate_scene(&mut rng, 32, 32, Illumination::Bright, &p);
            s.clutter = 0.0;
            let r = render(&s, 3, &p, false, &mut rng);
            assert!(r.spurious.is_empty());
            assert_eq!(count_local_maxima(&r.mod_a, 0, 0.5), s.heads.len());
            assert_eq!(count_local_maxima(&r.mod_b, 0, 0.5), s.heads.len());
        }
    }

    #[test]
    fn plateau_counts_once() {
        let t = Tensor::new(vec![1, 1, 3], vec![1.0f32, 1.0, 0.0]).unwrap();
        assert_eq!(count_local_maxima(&t, 0, 0.5), 1);
    }
}
