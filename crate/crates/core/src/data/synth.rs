//! Procedural glass scenes: a textured wall with framed panes that show a
//! blurred, dimmed copy of what lies behind them plus a specular streak.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

/// Light transmitted through a pane.
pub const TRANSMISSION: f64 = 0.7;
/// Slight blue-green cast added behind glass.
pub const TINT: [f64; 3] = [0.0, 0.04, 0.06];
const BLUR_RADIUS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    /// One frame, split into `n_regions` panes by vertical mullions.
    FramedPane,
    /// Two tall leaves side by side, standing on the lower part of the image.
    DoorPair,
    /// A pane running out of the image past one corner, split like
    /// `FramedPane`.
    CornerPane,
}

impl RegionKind {
    pub const ALL: [RegionKind; 3] = [RegionKind::FramedPane, RegionKind::DoorPair, RegionKind::CornerPane];

    pub fn name(self) -> &'static str {
        match self {
            RegionKind::FramedPane => "framed_pane",
            RegionKind::DoorPair => "door_pair",
            RegionKind::CornerPane => "corner_pane",
        }
    }
}

impl std::str::FromStr for RegionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown region kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub size: (usize, usize),
    /// Panes per frame, 1 to 3. Door pairs always have two leaves.
    pub n_regions: usize,
    pub region_kind: RegionKind,
    pub texture_seed: u64,
    pub reflection_strength: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            size: (64, 64),
            n_regions: 1,
            region_kind: RegionKind::FramedPane,
            texture_seed: 0,
            reflection_strength: 0.5,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < 16 || w < 16 {
            return Err(Error::config(format!("scene size {h}x{w} below 16x16")));
        }
        if !(1..=3).contains(&self.n_regions) {
            return Err(Error::config(format!("n_regions {} outside 1..=3", self.n_regions)));
        }
        if !(0.0..=1.0).contains(&self.reflection_strength) {
            return Err(Error::config(format!(
                "reflection_strength {} outside [0, 1]",
                self.reflection_strength
            )));
        }
        Ok(())
    }

    /// Varied scene spec for item `index` of a generated dataset.
    pub fn sampled(size: (usize, usize), seed: u64, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9e);
        rng.set_word_pos(index as u128 * 64);
        SyntheticSceneSpec {
            size,
            n_regions: rng.gen_range(1..=3),
            region_kind: RegionKind::ALL[index % 3],
            texture_seed: rng.gen(),
            reflection_strength: rng.gen_range(0.2..=1.0),
        }
    }
}

/// Axis-aligned rectangle, half-open: rows `y0..y1`, columns `x0..x1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    y0: isize,
    x0: isize,
    y1: isize,
    x1: isize,
}

impl Rect {
    fn contains(&self, y: isize, x: isize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    fn inset(&self, t: isize) -> Rect {
        Rect {
            y0: self.y0 + t,
            x0: self.x0 + t,
            y1: self.y1 - t,
            x1: self.x1 - t,
        }
    }

    /// Splits into `n` side-by-side panes separated by bars `t` wide.
    fn split(&self, n: usize, t: isize) -> Vec<Rect> {
        let n = n as isize;
        let width = self.x1 - self.x0;
        let pane = (width - (n - 1) * t) / n;
        (0..n)
            .map(|i| {
                let x0 = self.x0 + i * (pane + t);
                let x1 = if i == n - 1 { self.x1 } else { x0 + pane };
                Rect { x0, x1, ..*self }
            })
            .collect()
    }
}

/// Frame outline plus the glass panes inside it.
struct Frame {
    outer: Rect,
    panes: Vec<Rect>,
}

fn frac(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> isize {
    (len as f64 * rng.gen_range(lo..hi)).round() as isize
}

fn layout(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Vec<Frame> {
    let (h, w) = spec.size;
    let t = (h.min(w) / 32).max(1) as isize;
    let (hi, wi) = (h as isize, w as isize);
    match spec.region_kind {
        RegionKind::FramedPane => {
            let fh = frac(rng, h, 0.6, 0.85);
            let fw = frac(rng, w, 0.6, 0.85);
            let y0 = rng.gen_range(0..=hi - fh);
            let x0 = rng.gen_range(0..=wi - fw);
            let outer = Rect {
                y0,
                x0,
                y1: y0 + fh,
                x1: x0 + fw,
            };
            vec![Frame {
                outer,
                panes: outer.inset(t).split(spec.n_regions, t),
            }]
        }
        RegionKind::DoorPair => {
            let leaf = frac(rng, w, 0.2, 0.32);
            let fh = frac(rng, h, 0.6, 0.9);
            let fw = 2 * leaf + 3 * t;
            let x0 = rng.gen_range(0..=wi - fw);
            let y1 = hi - rng.gen_range(0..=(hi - fh) / 4);
            let outer = Rect {
                y0: y1 - fh,
                x0,
                y1,
                x1: x0 + fw,
            };
            vec![Frame {
                outer,
                panes: outer.inset(t).split(2, t),
            }]
        }
        RegionKind::CornerPane => {
            let fh = frac(rng, h, 0.55, 0.75);
            let fw = frac(rng, w, 0.55, 0.75);
            let (top, left) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            // frame sides that fall outside the image are pushed off by `t`
            let y0 = if top { -t } else { hi - fh };
            let x0 = if left { -t } else { wi - fw };
            let outer = Rect {
                y0,
                x0,
                y1: y0 + fh + t,
                x1: x0 + fw + t,
            };
            vec![Frame {
                outer,
                panes: outer.inset(t).split(spec.n_regions, t),
            }]
        }
    }
}

fn background(spec: &SyntheticSceneSpec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let (h, w) = spec.size;
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.65));
    struct Wave {
        fy: f64,
        fx: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let f = rng.gen_range(0.08..0.5);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            Wave {
                fy: f * theta.sin(),
                fx: f * theta.cos(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: std::array::from_fn(|_| rng.gen_range(0.02..0.12)),
            }
        })
        .collect();
    let blocks: Vec<(Rect, [f64; 3])> = (0..6)
        .map(|_| {
            let bh = rng.gen_range(2..=h / 4) as isize;
            let bw = rng.gen_range(2..=w / 4) as isize;
            let y0 = rng.gen_range(0..h as isize - bh);
            let x0 = rng.gen_range(0..w as isize - bw);
            let r = Rect {
                y0,
                x0,
                y1: y0 + bh,
                x1: x0 + bw,
            };
            (r, std::array::from_fn(|_| rng.gen_range(-0.25..0.25)))
        })
        .collect();
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-0.03..0.03)).collect();
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c] + noise[y * w + x];
        for wave in &waves {
            v += wave.amp[c] * (wave.fy * yf + wave.fx * xf + wave.phase).sin();
        }
        for (r, d) in &blocks {
            if r.contains(y as isize, x as isize) {
                v += d[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// Separable box blur with clamped borders.
fn box_blur(img: &Tensor, radius: usize) -> Tensor {
    let s = img.shape();
    let r = radius as isize;
    let taps = (2 * radius + 1) as f64;
    let pass = |src: &Tensor, horizontal: bool| {
        Tensor::from_fn(s, |n, c, y, x| {
            (-r..=r)
                .map(|d| {
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + d).clamp(0, s.w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, s.h as isize - 1), x as isize)
                    };
                    src.at(n, c, yy as usize, xx as usize)
                })
                .sum::<f64>()
                / taps
        })
    };
    pass(&pass(img, true), false)
}

/// What a pane shows of `background` without any reflection.
pub fn transmitted(background: &Tensor) -> Tensor {
    let blurred = box_blur(background, BLUR_RADIUS);
    Tensor::from_fn(background.shape(), |n, c, y, x| {
        (TRANSMISSION * blurred.at(n, c, y, x) + TINT[c]).clamp(0.0, 1.0)
    })
}

/// The background texture of a scene, before any glass is drawn.
pub fn scene_background(spec: &SyntheticSceneSpec) -> Tensor {
    background(spec)
}

pub fn generate(spec: &SyntheticSceneSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = layout(spec, &mut rng);
    let bg = background(spec);
    let through = transmitted(&bg);
    let frame_color: [f64; 3] = if rng.gen_bool(0.5) {
        std::array::from_fn(|_| rng.gen_range(0.05..0.2))
    } else {
        std::array::from_fn(|_| rng.gen_range(0.8..0.95))
    };
    let streaks: Vec<(f64, f64)> = frames
        .iter()
        .map(|f| {
            let o = f.outer;
            let span = ((o.y1 - o.y0) + (o.x1 - o.x0)) as f64;
            (rng.gen_range(0.25..0.75) * span, 0.08 * span)
        })
        .collect();

    let mask = Mask::from_fn(h, w, |y, x| {
        let (y, x) = (y as isize, x as isize);
        frames.iter().any(|f| f.panes.iter().any(|p| p.contains(y, x)))
    });
    let mut image = bg.clone();
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            for (f, &(centre, width)) in frames.iter().zip(&streaks) {
                if !f.outer.contains(yi, xi) {
                    continue;
                }
                if !mask.get(y, x) {
                    for (c, &fc) in frame_color.iter().enumerate() {
                        image.set(0, c, y, x, fc);
                    }
                    continue;
                }
                let u = ((yi - f.outer.y0) + (xi - f.outer.x0)) as f64;
                let glow = spec.reflection_strength * 0.6 * (-((u - centre) / width).powi(2)).exp();
                for c in 0..3 {
                    image.set(0, c, y, x, (through.at(0, c, y, x) + glow).min(1.0));
                }
            }
        }
    }
    let area = mask.area_fraction();
    if area <= 0.0 || area >= 1.0 {
        return Err(Error::config(format!("scene seed {seed} produced degenerate glass area {area}")));
    }
    Sample::new(image, mask)
}
