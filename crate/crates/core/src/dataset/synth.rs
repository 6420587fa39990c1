use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AuLabels, Dataset, DatasetManifest, FaceImage, SampleRef};
use crate::attention::AuCenterSpec;
use crate::error::{Error, Result};
use crate::face::{IMAGE_SIZE, NUM_AUS, TEMPLATE};

/// `(source, target, strength)`: when AU `source` is active, AU `target` is
/// forced on with probability `strength`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairBoost {
    pub source: usize,
    pub target: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceSpec {
    pub base_rates: [f64; NUM_AUS],
    pub pair_boosts: Vec<PairBoost>,
    pub seed: u64,
}

impl Default for CooccurrenceSpec {
    fn default() -> Self {
        CooccurrenceSpec {
            base_rates: [0.3, 0.25, 0.35, 0.4, 0.3, 0.25, 0.45, 0.2, 0.2, 0.15, 0.5, 0.3],
            pair_boosts: vec![
                PairBoost { source: 0, target: 1, strength: 0.9 },
                PairBoost { source: 3, target: 6, strength: 0.9 },
                PairBoost { source: 10, target: 11, strength: 0.9 },
                PairBoost { source: 2, target: 4, strength: 0.9 },
            ],
            seed: 0,
        }
    }
}

impl CooccurrenceSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, &r) in self.base_rates.iter().enumerate() {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::validation(format!("base rate {i} = {r} not in (0,1)")));
            }
        }
        for b in &self.pair_boosts {
            if b.source >= NUM_AUS || b.target >= NUM_AUS {
                return Err(Error::validation(format!("pair boost {b:?} indexes past {NUM_AUS} AUs")));
            }
            if b.source == b.target {
                return Err(Error::validation(format!("pair boost {b:?} links an AU to itself")));
            }
            if !(0.0..=1.0).contains(&b.strength) {
                return Err(Error::validation(format!("pair boost strength {} not in [0,1]", b.strength)));
            }
        }
        Ok(())
    }

    fn draw_labels(&self, rng: &mut ChaCha8Rng) -> AuLabels {
        let mut labels = [0u8; NUM_AUS];
        for (l, &r) in labels.iter_mut().zip(&self.base_rates) {
            *l = (rng.random::<f64>() < r) as u8;
        }
        for b in &self.pair_boosts {
            // always consume a draw so the stream does not depend on labels
            let u: f64 = rng.random();
            if labels[b.source] == 1 && u < b.strength {
                labels[b.target] = 1;
            }
        }
        labels
    }
}

const NOISE_AMPLITUDE: f64 = 0.05;
const FACE_CENTER: (f64, f64) = (56.0, 60.0);

const AU_PALETTE: [[f64; 3]; NUM_AUS] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.10],
    [0.10, 0.20, 0.90],
    [0.90, 0.80, 0.10],
    [0.80, 0.10, 0.80],
    [0.10, 0.80, 0.80],
    [0.95, 0.50, 0.10],
    [0.50, 0.10, 0.90],
    [0.05, 0.05, 0.05],
    [1.00, 1.00, 1.00],
    [0.50, 0.35, 0.10],
    [0.20, 0.50, 0.30],
];

/// Generates `n` samples: labels from the co-occurrence sampler, landmarks
/// from a jittered template, images from [`render_face`]. The output is a
/// pure function of `(spec, n)`.
pub fn generate_synthetic(spec: &CooccurrenceSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::validation("sample count must be at least 1"));
    }
    let centers = AuCenterSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for k in 0..n {
        let labels = spec.draw_labels(&mut rng);
        let scale = rng.random_range(0.94..1.06);
        let shift = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        let landmarks: Vec<f64> = TEMPLATE
            .iter()
            .flat_map(|&(x, y)| {
                let px = FACE_CENTER.0 + scale * (x - FACE_CENTER.0) + shift.0;
                let py = FACE_CENTER.1 + scale * (y - FACE_CENTER.1) + shift.1;
                [round4(px), round4(py)]
            })
            .collect();
        let image = render_face(&landmarks, &labels, &centers, &mut rng)?;
        let id = format!("syn_{k:06}");
        samples.push(SampleRef {
            image_path: format!("images/{id}.png"),
            id,
            labels,
            landmarks,
        });
        images.push(image);
    }
    Ok(Dataset {
        manifest: DatasetManifest::new(samples),
        images,
    })
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new(bg: [f64; 3]) -> Self {
        let mut px = vec![0.0; IMAGE_SIZE * IMAGE_SIZE * 3];
        for p in px.chunks_exact_mut(3) {
            p.copy_from_slice(&bg);
        }
        Canvas { px }
    }

    fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        let i = (y * IMAGE_SIZE + x) * 3;
        self.px[i..i + 3].copy_from_slice(&c);
    }

    fn fill_ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, c: [f64; 3]) {
        let (x0, x1) = span(cx - rx, cx + rx);
        let (y0, y1) = span(cy - ry, cy + ry);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.set(x, y, c);
                }
            }
        }
    }

    fn thick_segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64, c: [f64; 3]) {
        let (x0, x1) = span(a.0.min(b.0) - radius, a.0.max(b.0) + radius);
        let (y0, y1) = span(a.1.min(b.1) - radius, a.1.max(b.1) + radius);
        let (vx, vy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (vx * vx + vy * vy).max(1e-12);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0);
                let (dx, dy) = (px - a.0 - t * vx, py - a.1 - t * vy);
                if dx * dx + dy * dy <= radius * radius {
                    self.set(x, y, c);
                }
            }
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], radius: f64, c: [f64; 3]) {
        for w in pts.windows(2) {
            self.thick_segment(w[0], w[1], radius, c);
        }
    }
}

fn span(lo: f64, hi: f64) -> (usize, usize) {
    let lo = lo.floor().max(0.0) as usize;
    let hi = (hi.ceil().max(0.0) as usize + 1).min(IMAGE_SIZE);
    (lo.min(IMAGE_SIZE), hi)
}

/// Draws a sketch face through `landmarks`, then one colored stroke per
/// active AU at each of its landmark-anchored centers, then additive uniform
/// noise of amplitude 0.05.
pub fn render_face(
    landmarks: &[f64],
    labels: &AuLabels,
    centers: &AuCenterSpec,
    rng: &mut impl Rng,
) -> Result<FaceImage> {
    let pt = |k: usize| (landmarks[2 * k], landmarks[2 * k + 1]);
    let pts = |r: std::ops::Range<usize>| r.map(pt).collect::<Vec<_>>();
    let mut canvas = Canvas::new([0.55, 0.60, 0.65]);

    // face oval sized by the inter-ocular span
    let (l, r) = (pt(19), pt(28));
    let s = (r.0 - l.0).hypot(r.1 - l.1) / 48.0;
    let nose = pt(12);
    canvas.fill_ellipse(nose.0, nose.1 + 4.0 * s, 40.0 * s, 50.0 * s, [0.85, 0.70, 0.60]);

    let brow = [0.30, 0.20, 0.10];
    canvas.polyline(&pts(0..5), 1.2 * s, brow);
    canvas.polyline(&pts(5..10), 1.2 * s, brow);
    canvas.polyline(&pts(10..14), 0.8 * s, [0.6, 0.45, 0.4]);
    canvas.polyline(&pts(14..19), 0.8 * s, [0.6, 0.45, 0.4]);
    for eye in [19..25, 25..31] {
        let p = pts(eye);
        let cx = p.iter().map(|q| q.0).sum::<f64>() / 6.0;
        let cy = p.iter().map(|q| q.1).sum::<f64>() / 6.0;
        let rx = (p[3].0 - p[0].0).abs() / 2.0;
        canvas.fill_ellipse(cx, cy, rx, 2.8 * s, [0.95, 0.95, 0.95]);
        canvas.fill_ellipse(cx, cy, 2.0 * s, 2.0 * s, [0.15, 0.10, 0.05]);
    }
    let mut outer = pts(31..43);
    outer.push(pt(31));
    canvas.polyline(&outer, 1.0 * s, [0.70, 0.30, 0.30]);
    let mut inner = pts(43..49);
    inner.push(pt(43));
    canvas.polyline(&inner, 0.7 * s, [0.55, 0.20, 0.20]);

    for (au, &on) in labels.iter().enumerate() {
        if on == 0 {
            continue;
        }
        let angle = au as f64 * std::f64::consts::PI / NUM_AUS as f64;
        let half = (4.5 * s * angle.cos(), 4.5 * s * angle.sin());
        for c in centers.centers_px(au, landmarks, s) {
            canvas.thick_segment(
                (c.0 - half.0, c.1 - half.1),
                (c.0 + half.0, c.1 + half.1),
                1.6 * s,
                AU_PALETTE[au],
            );
        }
    }

    for v in canvas.px.iter_mut() {
        *v = (*v + rng.random_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).clamp(0.0, 1.0);
    }
    FaceImage::from_unit(&canvas.px)
}
