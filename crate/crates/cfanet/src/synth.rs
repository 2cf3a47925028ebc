//! Deterministic synthetic crowd scenes: dark elliptical heads over
//! configurable backgrounds, with exact point annotations. Everything is a
//! pure function of the `SceneSpec`, including its seed.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::groundtruth::PointAnnotation;
use crate::io::Image;

/// Number of mixture components in the clustered layout.
pub const CLUSTER_COUNT: usize = 3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot place {n_people} heads of radius up to {radius:.1} in a {width}x{height} scene (capacity {capacity})")]
    TooCrowded {
        n_people: usize,
        radius: f64,
        width: usize,
        height: usize,
        capacity: usize,
    },
    #[error("head radius range ({lo}, {hi}) must satisfy 0.5 <= lo <= hi")]
    BadRadiusRange { lo: f64, hi: f64 },
    #[error("unknown {what} `{got}` (expected one of {options})")]
    UnknownVariant {
        what: &'static str,
        got: String,
        options: &'static str,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Points uniform over the placeable region.
    Uniform,
    /// Gaussian mixture around three seeded cluster centers.
    Clustered,
    /// Density grows linearly along x.
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    /// One light-gray level everywhere.
    Flat,
    /// Bilinear value noise plus per-pixel jitter.
    TexturedNoise,
    /// Noise base plus dark rectangles/ellipses that overlap head
    /// intensities, so background mass is easy to mistake for crowd.
    GeometricClutter,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Uniform => "uniform",
            Layout::Clustered => "clustered",
            Layout::Gradient => "gradient",
        })
    }
}

impl FromStr for Layout {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Layout::Uniform),
            "clustered" => Ok(Layout::Clustered),
            "gradient" => Ok(Layout::Gradient),
            _ => Err(SynthError::UnknownVariant {
                what: "layout",
                got: s.into(),
                options: "uniform, clustered, gradient",
            }),
        }
    }
}

impl fmt::Display for Background {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Background::Flat => "flat",
            Background::TexturedNoise => "textured-noise",
            Background::GeometricClutter => "geometric-clutter",
        })
    }
}

impl FromStr for Background {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Background::Flat),
            "textured-noise" => Ok(Background::TexturedNoise),
            "geometric-clutter" => Ok(Background::GeometricClutter),
            _ => Err(SynthError::UnknownVariant {
                what: "background",
                got: s.into(),
                options: "flat, textured-noise, geometric-clutter",
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_people: usize,
    pub layout: Layout,
    pub head_radius_range: (f64, f64),
    pub background: Background,
    pub seed: u64,
}

impl SceneSpec {
    /// Heads must fit fully inside the frame; centers stay this far from it.
    fn margin(&self) -> f64 {
        (self.head_radius_range.1 * 1.3).ceil() + 1.0
    }

    fn validate(&self) -> Result<(usize, f64, f64)> {
        let (lo, hi) = self.head_radius_range;
        if !(0.5..=hi).contains(&lo) || !hi.is_finite() {
            return Err(SynthError::BadRadiusRange { lo, hi });
        }
        let m = self.margin();
        let span_x = self.width as f64 - 2.0 * m;
        let span_y = self.height as f64 - 2.0 * m;
        // One head per placeable pixel: heads may overlap heavily, but a
        // count beyond this leaves no scene to see.
        let capacity = if span_x > 0.0 && span_y > 0.0 {
            (span_x * span_y) as usize
        } else {
            0
        };
        if self.n_people > capacity {
            return Err(SynthError::TooCrowded {
                n_people: self.n_people,
                radius: hi * 1.3,
                width: self.width,
                height: self.height,
                capacity,
            });
        }
        Ok((capacity, span_x.max(0.0), span_y.max(0.0)))
    }
}

/// Sampled points in person order. The rng draw order is a compatibility
/// contract: (clustered only: 3 centers as x,y pairs, then all n cluster
/// indices) then per-person coordinates.
fn sample_points(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let m = spec.margin();
    let (w, h) = (spec.width as f64, spec.height as f64);
    let n = spec.n_people;
    if n == 0 {
        return Vec::new();
    }
    match spec.layout {
        Layout::Uniform => (0..n)
            .map(|_| (rng.gen_range(m..w - m), rng.gen_range(m..h - m)))
            .collect(),
        Layout::Gradient => (0..n)
            .map(|_| {
                // Inverse CDF of a linear density on [m, w-m].
                let x = m + (w - 2.0 * m) * rng.gen_range(0.0f64..1.0).sqrt();
                (x, rng.gen_range(m..h - m))
            })
            .collect(),
        Layout::Clustered => {
            let centers: Vec<(f64, f64)> = (0..CLUSTER_COUNT)
                .map(|_| (rng.gen_range(m..w - m), rng.gen_range(m..h - m)))
                .collect();
            let choices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..CLUSTER_COUNT)).collect();
            let sigma = w.min(h) / 8.0;
            let normal = Normal::new(0.0, sigma).expect("sigma is positive");
            choices
                .iter()
                .map(|&c| {
                    let (cx, cy) = centers[c];
                    loop {
                        let x = cx + normal.sample(rng);
                        let y = cy + normal.sample(rng);
                        if x >= m && x < w - m && y >= m && y < h - m {
                            return (x, y);
                        }
                    }
                })
                .collect()
        }
    }
}

/// Grayscale background raster in [0, 255].
fn render_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (w, h) = (spec.width, spec.height);
    let mut canvas = vec![205.0f32; w * h];
    if spec.background == Background::Flat {
        return canvas;
    }
    // Value noise: coarse random grid, bilinearly interpolated, mild jitter.
    let cell = 8usize;
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let grid: Vec<f32> = (0..gw * gh)
        .map(|_| rng.gen_range(140.0f32..235.0))
        .collect();
    for y in 0..h {
        let gy = y as f32 / cell as f32;
        let (y0, fy) = (gy as usize, gy.fract());
        for x in 0..w {
            let gx = x as f32 / cell as f32;
            let (x0, fx) = (gx as usize, gx.fract());
            let top = grid[y0 * gw + x0] * (1.0 - fx) + grid[y0 * gw + x0 + 1] * fx;
            let bot = grid[(y0 + 1) * gw + x0] * (1.0 - fx) + grid[(y0 + 1) * gw + x0 + 1] * fx;
            canvas[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    for v in &mut canvas {
        *v += rng.gen_range(-6.0f32..6.0);
    }
    if spec.background == Background::GeometricClutter {
        let shapes = (w * h / 2048).max(3);
        for _ in 0..shapes {
            let elliptical: bool = rng.gen();
            let cx = rng.gen_range(0.0..w as f64);
            let cy = rng.gen_range(0.0..h as f64);
            let max_r = (w.min(h) as f64 / 6.0).max(6.0);
            let rx = rng.gen_range(4.0..=max_r);
            let ry = rng.gen_range(4.0..=max_r);
            let shade = rng.gen_range(40.0f32..150.0);
            fill_ellipse_like(&mut canvas, w, h, cx, cy, rx, ry, shade, elliptical);
        }
    }
    canvas
}

/// Paint a filled ellipse (or its bounding rectangle) with a soft edge.
#[allow(clippy::too_many_arguments)]
fn fill_ellipse_like(
    canvas: &mut [f32],
    w: usize,
    h: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    shade: f32,
    elliptical: bool,
) {
    let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + rx + 1.0).ceil() as usize).min(w.saturating_sub(1));
    let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + ry + 1.0).ceil() as usize).min(h.saturating_sub(1));
    if canvas.is_empty() {
        return;
    }
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = (px as f64 + 0.5 - cx) / rx;
            let dy = (py as f64 + 0.5 - cy) / ry;
            let u = if elliptical {
                dx * dx + dy * dy
            } else {
                dx.abs().max(dy.abs()).powi(2)
            };
            if u <= 1.0 {
                let alpha = ((1.0 - u) * 4.0).min(1.0) as f32;
                let slot = &mut canvas[py * w + px];
                *slot += alpha * (shade - *slot);
            }
        }
    }
}

/// Render one scene. Draw order: layout points, background, then one
/// (radius, aspect, shade) triple per head.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Image, PointAnnotation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = sample_points(spec, &mut rng);
    let mut canvas = render_background(spec, &mut rng);
    let (lo, hi) = spec.head_radius_range;
    for &(x, y) in &points {
        let rx = rng.gen_range(lo..=hi);
        let aspect = rng.gen_range(0.7..1.3);
        let shade = rng.gen_range(25.0f32..90.0);
        fill_ellipse_like(
            &mut canvas,
            spec.width,
            spec.height,
            x,
            y,
            rx,
            rx * aspect,
            shade,
            true,
        );
    }
    let data: Vec<u8> = canvas
        .iter()
        .flat_map(|&v| {
            let byte = v.round().clamp(0.0, 255.0) as u8;
            [byte; 3]
        })
        .collect();
    let image =
        Image::new(spec.width, spec.height, 3, data).expect("canvas length matches dimensions");
    let annotation = PointAnnotation::new(
        format!("scene-{:016x}.ppm", spec.seed),
        spec.width,
        spec.height,
        points,
    )
    .expect("sampled points are in bounds by construction");
    Ok((image, annotation))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    fn spec(layout: Layout, background: Background, n: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            width: 96,
            height: 96,
            n_people: n,
            layout,
            head_radius_range: (2.0, 4.0),
            background,
            seed,
        }
    }

    #[test]
    fn zero_people_flat_is_constant() {
        let (image, ann) = generate_scene(&spec(Layout::Uniform, Background::Flat, 0, 1)).unwrap();
        assert!(ann.points.is_empty());
        assert!(image.data.iter().all(|&b| b == image.data[0]));
    }

    #[test]
    fn same_seed_reproduces_bytes_different_seed_does_not() {
        let s = spec(Layout::Clustered, Background::GeometricClutter, 40, 7);
        let (i1, a1) = generate_scene(&s).unwrap();
        let (i2, a2) = generate_scene(&s).unwrap();
        assert_eq!(i1, i2);
        assert_eq!(a1, a2);
        let (i3, _) = generate_scene(&SceneSpec { seed: 8, ..s }).unwrap();
        assert_ne!(i1, i3);
    }

    #[test]
    fn clustered_counts_match_multinomial_replay() {
        let s = spec(Layout::Clustered, Background::Flat, 200, 21);
        let (_, ann) = generate_scene(&s).unwrap();

        // Independent replay of the documented draw order.
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let m = (s.head_radius_range.1 * 1.3).ceil() + 1.0;
        let (w, h) = (s.width as f64, s.height as f64);
        let centers: Vec<(f64, f64)> = (0..CLUSTER_COUNT)
            .map(|_| (rng.gen_range(m..w - m), rng.gen_range(m..h - m)))
            .collect();
        let choices: Vec<usize> = (0..200).map(|_| rng.gen_range(0..CLUSTER_COUNT)).collect();
        let normal = Normal::new(0.0, w.min(h) / 8.0).unwrap();
        let replayed: Vec<(f64, f64)> = choices
            .iter()
            .map(|&c| loop {
                let x = centers[c].0 + normal.sample(&mut rng);
                let y = centers[c].1 + normal.sample(&mut rng);
                if x >= m && x < w - m && y >= m && y < h - m {
                    return (x, y);
                }
            })
            .collect();
        assert_eq!(ann.points, replayed);

        let mut counts = [0usize; CLUSTER_COUNT];
        for &c in &choices {
            counts[c] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 200);
        assert!(counts.iter().all(|&c| c > 0), "all clusters drawn: {counts:?}");
    }

    #[test]
    fn gradient_mass_shifts_right() {
        let s = SceneSpec {
            width: 160,
            height: 80,
            n_people: 2000,
            ..spec(Layout::Gradient, Background::Flat, 0, 33)
        };
        let (_, ann) = generate_scene(&s).unwrap();
        let m = s.margin();
        let mid = m + (s.width as f64 - 2.0 * m) / 2.0;
        let right = ann.points.iter().filter(|&&(x, _)| x > mid).count();
        // Linear density puts 3/4 of the mass right of the midpoint.
        let expected = 1500.0;
        let sd = (2000.0f64 * 0.75 * 0.25).sqrt();
        assert!(
            (right as f64 - expected).abs() < 4.0 * sd,
            "{right} right-half points vs expected {expected}"
        );
    }

    #[test]
    fn capacity_errors_are_reported() {
        // A radius-6 head cannot fit in 16x16 at all.
        let tiny = SceneSpec {
            width: 16,
            height: 16,
            n_people: 1,
            head_radius_range: (4.0, 6.0),
            ..spec(Layout::Uniform, Background::Flat, 1, 0)
        };
        assert!(matches!(
            generate_scene(&tiny),
            Err(SynthError::TooCrowded { capacity: 0, .. })
        ));
        // Zero heads always fit, even where one cannot.
        assert!(generate_scene(&SceneSpec { n_people: 0, ..tiny }).is_ok());
        // Over-capacity counts are rejected with the bound echoed back.
        let packed = SceneSpec {
            n_people: 10_000,
            ..spec(Layout::Uniform, Background::Flat, 0, 0)
        };
        match generate_scene(&packed) {
            Err(SynthError::TooCrowded { capacity, .. }) => assert!(capacity < 10_000),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn bad_radius_range_is_rejected() {
        let s = SceneSpec {
            head_radius_range: (5.0, 2.0),
            ..spec(Layout::Uniform, Background::Flat, 1, 0)
        };
        assert!(matches!(
            generate_scene(&s),
            Err(SynthError::BadRadiusRange { .. })
        ));
    }

    #[test]
    fn heads_are_darker_than_local_background() {
        let mut darker = 0usize;
        let mut total = 0usize;
        for (seed, background) in [
            (1, Background::Flat),
            (2, Background::TexturedNoise),
            (3, Background::GeometricClutter),
            (4, Background::GeometricClutter),
        ] {
            let s = SceneSpec {
                width: 128,
                height: 128,
                ..spec(Layout::Uniform, background, 60, seed)
            };
            let (image, ann) = generate_scene(&s).unwrap();
            for &(x, y) in &ann.points {
                let (px, py) = (x as usize, y as usize);
                let center = image.at(px, py, 0) as f64;
                // Local background = median over a ring well outside any
                // head radius but near enough to be "local".
                let mut ring = Vec::new();
                for dy in -12i64..=12 {
                    for dx in -12i64..=12 {
                        let r2 = dx * dx + dy * dy;
                        if !(81..=144).contains(&r2) {
                            continue;
                        }
                        let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                        if qx >= 0 && qy >= 0 && (qx as usize) < 128 && (qy as usize) < 128 {
                            ring.push(image.at(qx as usize, qy as usize, 0));
                        }
                    }
                }
                ring.sort_unstable();
                let median = ring[ring.len() / 2] as f64;
                total += 1;
                if center < median {
                    darker += 1;
                }
            }
        }
        let ratio = darker as f64 / total as f64;
        assert!(ratio >= 0.95, "only {darker}/{total} heads darker than surroundings");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn scenes_have_exact_in_bounds_counts(
            seed in 0u64..1000,
            n in 0usize..40,
            layout_idx in 0usize..3,
            bg_idx in 0usize..3,
        ) {
            let layout = [Layout::Uniform, Layout::Clustered, Layout::Gradient][layout_idx];
            let background = [
                Background::Flat,
                Background::TexturedNoise,
                Background::GeometricClutter,
            ][bg_idx];
            let (image, ann) = generate_scene(&spec(layout, background, n, seed)).unwrap();
            prop_assert_eq!(ann.points.len(), n);
            prop_assert!(ann.validate().is_ok());
            prop_assert_eq!(image.data.len(), 96 * 96 * 3);
        }
    }

    #[test]
    fn enum_names_round_trip() {
        for l in [Layout::Uniform, Layout::Clustered, Layout::Gradient] {
            assert_eq!(l.to_string().parse::<Layout>().unwrap(), l);
        }
        for b in [
            Background::Flat,
            Background::TexturedNoise,
            Background::GeometricClutter,
        ] {
            assert_eq!(b.to_string().parse::<Background>().unwrap(), b);
        }
        assert!("speckled".parse::<Background>().is_err());
        // The serde names match the FromStr names.
        assert_eq!(
            serde_json::to_string(&Background::TexturedNoise).unwrap(),
            "\"textured-noise\""
        );
    }
}
