//! Fixed face geometry shared by the renderer, the alignment head and the
//! attention module.
//!
//! Landmarks follow the common 49-point layout (the 68-point scheme without
//! the jaw contour), in pixel coordinates of the 112×112 frame:
//!
//! | indices | region                         |
//! |---------|--------------------------------|
//! | 0–4     | right brow (outer → inner)     |
//! | 5–9     | left brow (inner → outer)      |
//! | 10–13   | nose bridge                    |
//! | 14–18   | nose base                      |
//! | 19–24   | right eye, 19 = outer corner   |
//! | 25–30   | left eye, 28 = outer corner    |
//! | 31–42   | outer lip contour, 31/37 = corners |
//! | 43–48   | inner lip contour              |

/// Number of action units per sample.
pub const NUM_AUS: usize = 12;
/// Number of landmarks per face.
pub const NUM_LANDMARKS: usize = 49;
/// Length of a flattened `(x, y)` landmark vector.
pub const LANDMARK_DIM: usize = 2 * NUM_LANDMARKS;
/// Input side length in pixels.
pub const IMAGE_SIZE: usize = 112;
pub const IMAGE_CHANNELS: usize = 3;

/// Default inter-ocular pair: outer eye corners.
pub const DEFAULT_EYE_PAIR: (usize, usize) = (19, 28);

pub const DEFAULT_AU_NAMES: [&str; NUM_AUS] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

/// Mean face, `(x, y)` per landmark.
pub const TEMPLATE: [(f64, f64); NUM_LANDMARKS] = [
    // right brow
    (28.0, 36.0),
    (33.0, 33.0),
    (38.0, 32.0),
    (43.0, 33.0),
    (48.0, 35.0),
    // left brow
    (64.0, 35.0),
    (69.0, 33.0),
    (74.0, 32.0),
    (79.0, 33.0),
    (84.0, 36.0),
    // nose bridge
    (56.0, 42.0),
    (56.0, 48.0),
    (56.0, 54.0),
    (56.0, 60.0),
    // nose base
    (48.0, 66.0),
    (52.0, 67.0),
    (56.0, 68.0),
    (60.0, 67.0),
    (64.0, 66.0),
    // right eye
    (32.0, 44.0),
    (36.0, 41.0),
    (42.0, 41.0),
    (46.0, 44.0),
    (42.0, 46.0),
    (36.0, 46.0),
    // left eye
    (66.0, 44.0),
    (70.0, 41.0),
    (76.0, 41.0),
    (80.0, 44.0),
    (76.0, 46.0),
    (70.0, 46.0),
    // outer lip
    (42.0, 84.0),
    (46.0, 80.0),
    (51.0, 78.0),
    (56.0, 78.0),
    (61.0, 78.0),
    (66.0, 80.0),
    (70.0, 84.0),
    (66.0, 88.0),
    (61.0, 90.0),
    (56.0, 90.0),
    (51.0, 90.0),
    (46.0, 88.0),
    // inner lip
    (45.0, 84.0),
    (52.0, 82.0),
    (60.0, 82.0),
    (67.0, 84.0),
    (60.0, 86.0),
    (52.0, 86.0),
];

/// Template flattened as `[x0, y0, x1, y1, ...]`.
pub fn template_vector() -> Vec<f64> {
    TEMPLATE.iter().flat_map(|&(x, y)| [x, y]).collect()
}
