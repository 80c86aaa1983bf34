//! Label maps and boundary ground truth.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

pub const IGNORE: u8 = 255;

/// H×W grid of class ids; `IGNORE` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

/// Boundary-encoding scheme of the boundary head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BoundaryMode {
    /// Boundary pixels carry their class; class 0 is stored as `K` so that 0
    /// can mean "not a boundary".
    ClassBoundary,
    /// Boundary pixels are 1.
    ZeroOneBoundary,
}

/// H×W boundary targets: 0 = non-boundary, nonzero = boundary id,
/// `IGNORE` preserved from the source labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
    mode: BoundaryMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryConfig {
    /// Chebyshev radius in pixels.
    pub epsilon: usize,
    pub mode: BoundaryMode,
    pub num_classes: usize,
}

impl BoundaryConfig {
    pub fn new(epsilon: usize, mode: BoundaryMode, num_classes: usize) -> Result<Self> {
        if epsilon < 1 {
            return Err(Error::Config("boundary epsilon must be at least 1".into()));
        }
        if num_classes < 1 || num_classes >= IGNORE as usize {
            return Err(Error::Config(format!("num_classes {num_classes} must be in 1..255")));
        }
        Ok(Self {
            epsilon,
            mode,
            num_classes,
        })
    }

    /// Id written for a boundary pixel of `class`.
    pub fn boundary_id(&self, class: u8) -> u8 {
        match self.mode {
            BoundaryMode::ZeroOneBoundary => 1,
            BoundaryMode::ClassBoundary if class == 0 => self.num_classes as u8,
            BoundaryMode::ClassBoundary => class,
        }
    }

    /// Channels of a head predicting these targets.
    pub fn head_classes(&self) -> usize {
        match self.mode {
            BoundaryMode::ClassBoundary => self.num_classes + 1,
            BoundaryMode::ZeroOneBoundary => 2,
        }
    }
}

/// Shared access to integer grids.
pub trait IdGrid: Sized {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn ids(&self) -> &[u8];
    fn with_ids(&self, height: usize, width: usize, ids: Vec<u8>) -> Self;

    fn get(&self, y: usize, x: usize) -> u8 {
        self.ids()[y * self.width() + x]
    }
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("label map dimensions must be at least 1".into()));
        }
        if ids.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} with {} ids",
                ids.len()
            )));
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self::new(height, width, vec![id; height * width]).expect("nonzero dims")
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn into_ids(self) -> Vec<u8> {
        self.ids
    }

    /// Errors on the first id that is neither `< classes` nor `IGNORE`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id != IGNORE && id as usize >= classes) {
            Some(&id) => Err(Error::LabelOutOfRange { id: id as u32, classes }),
            None => Ok(()),
        }
    }
}

impl IdGrid for LabelMap {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn ids(&self) -> &[u8] {
        &self.ids
    }
    fn with_ids(&self, height: usize, width: usize, ids: Vec<u8>) -> Self {
        Self { height, width, ids }
    }
}

impl BoundaryMap {
    pub fn mode(&self) -> BoundaryMode {
        self.mode
    }

    pub fn boundary_count(&self) -> usize {
        self.ids.iter().filter(|&&v| v != 0 && v != IGNORE).count()
    }

    /// The boundary grid viewed as a label map (for files and losses).
    pub fn to_label_map(&self) -> LabelMap {
        LabelMap {
            height: self.height,
            width: self.width,
            ids: self.ids.clone(),
        }
    }
}

impl IdGrid for BoundaryMap {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn ids(&self) -> &[u8] {
        &self.ids
    }
    fn with_ids(&self, height: usize, width: usize, ids: Vec<u8>) -> Self {
        Self {
            height,
            width,
            ids,
            mode: self.mode,
        }
    }
}

/// Strided 1-D lines of a grid: `count` lines of `len` elements, line `i`
/// starting at `i * line_step`, elements `stride` apart.
#[derive(Clone, Copy)]
struct Lines {
    count: usize,
    len: usize,
    line_step: usize,
    stride: usize,
}

/// Windowed (min of `lo_src`, max of `hi_src`) along each line, radius `r`,
/// clipped at the borders.
fn window_extrema(lo_src: &[i16], hi_src: &[i16], lines: Lines, r: usize) -> (Vec<i16>, Vec<i16>) {
    let mut mins = vec![0i16; lo_src.len()];
    let mut maxs = vec![0i16; hi_src.len()];
    for line in 0..lines.count {
        let base = line * lines.line_step;
        for i in 0..lines.len {
            let (mut mn, mut mx) = (i16::MAX, i16::MIN);
            for j in i.saturating_sub(r)..=(i + r).min(lines.len - 1) {
                mn = mn.min(lo_src[base + j * lines.stride]);
                mx = mx.max(hi_src[base + j * lines.stride]);
            }
            mins[base + i * lines.stride] = mn;
            maxs[base + i * lines.stride] = mx;
        }
    }
    (mins, maxs)
}

/// Marks every non-ignore pixel that has a non-ignore pixel of a different
/// class within Chebyshev distance `epsilon`.
pub fn boundary_labels(labels: &LabelMap, config: &BoundaryConfig) -> BoundaryMap {
    let (h, w) = (labels.height, labels.width);
    let r = config.epsilon;
    // Ignore pixels are neutral: +inf for the min pass, -inf for the max pass.
    let as_min: Vec<i16> = labels
        .ids
        .iter()
        .map(|&v| if v == IGNORE { i16::MAX } else { v as i16 })
        .collect();
    let as_max: Vec<i16> = labels
        .ids
        .iter()
        .map(|&v| if v == IGNORE { i16::MIN } else { v as i16 })
        .collect();
    let rows = Lines {
        count: h,
        len: w,
        line_step: w,
        stride: 1,
    };
    let cols = Lines {
        count: w,
        len: h,
        line_step: 1,
        stride: w,
    };
    let (row_min, row_max) = window_extrema(&as_min, &as_max, rows, r);
    let (min, max) = window_extrema(&row_min, &row_max, cols, r);

    let ids = labels
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            if id == IGNORE {
                IGNORE
            } else if min[i] != id as i16 || max[i] != id as i16 {
                config.boundary_id(id)
            } else {
                0
            }
        })
        .collect();
    BoundaryMap {
        height: h,
        width: w,
        ids,
        mode: config.mode,
    }
}

/// Nearest-neighbour downsampling taking the top-left pixel of each
/// `factor`×`factor` cell.
pub fn downsample_labels<G: IdGrid>(grid: &G, factor: usize) -> Result<G> {
    let (h, w) = (grid.height(), grid.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Divisibility {
            height: h,
            width: w,
            multiple: factor.max(1),
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut ids = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            ids.push(grid.get(y * factor, x * factor));
        }
    }
    Ok(grid.with_ids(oh, ow, ids))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelReport {
    /// Distinct out-of-range ids with their pixel counts.
    pub violations: BTreeMap<u8, usize>,
    pub ignore_fraction: f64,
    /// Pixel count per class id `0..K`.
    pub class_counts: Vec<usize>,
}

impl LabelReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_labels(labels: &LabelMap, num_classes: usize) -> LabelReport {
    let mut hist = [0usize; 256];
    for &id in &labels.ids {
        hist[id as usize] += 1;
    }
    let violations = (num_classes..255)
        .filter(|&id| hist[id] > 0)
        .map(|id| (id as u8, hist[id]))
        .collect();
    LabelReport {
        violations,
        ignore_fraction: hist[IGNORE as usize] as f64 / labels.ids.len() as f64,
        class_counts: hist[..num_classes.min(255)].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_columns() -> LabelMap {
        LabelMap::new(4, 4, (0..16).map(|i| if i % 4 < 2 { 1 } else { 2 }).collect()).unwrap()
    }

    #[test]
    fn uniform_map_has_no_boundary() {
        let cfg = BoundaryConfig::new(2, BoundaryMode::ClassBoundary, 3).unwrap();
        let b = boundary_labels(&LabelMap::filled(6, 5, 2), &cfg);
        assert!(b.ids().iter().all(|&v| v == 0));
    }

    #[test]
    fn two_column_map_class_mode() {
        let cfg = BoundaryConfig::new(1, BoundaryMode::ClassBoundary, 3).unwrap();
        let b = boundary_labels(&two_columns(), &cfg);
        for y in 0..4 {
            assert_eq!([b.get(y, 0), b.get(y, 1), b.get(y, 2), b.get(y, 3)], [0, 1, 2, 0]);
        }
    }

    #[test]
    fn two_column_map_zero_one_mode() {
        let cfg = BoundaryConfig::new(1, BoundaryMode::ZeroOneBoundary, 3).unwrap();
        let b = boundary_labels(&two_columns(), &cfg);
        for y in 0..4 {
            assert_eq!([b.get(y, 0), b.get(y, 1), b.get(y, 2), b.get(y, 3)], [0, 1, 1, 0]);
        }
    }

    #[test]
    fn class_zero_boundary_is_remapped() {
        let labels = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let cfg = BoundaryConfig::new(1, BoundaryMode::ClassBoundary, 4).unwrap();
        assert_eq!(boundary_labels(&labels, &cfg).ids(), &[4, 1]);
    }

    #[test]
    fn ignore_pixels_neither_emit_nor_receive() {
        let labels = LabelMap::new(1, 3, vec![1, IGNORE, 2]).unwrap();
        let cfg = BoundaryConfig::new(1, BoundaryMode::ZeroOneBoundary, 3).unwrap();
        assert_eq!(boundary_labels(&labels, &cfg).ids(), &[0, IGNORE, 0]);
        let cfg2 = BoundaryConfig::new(2, BoundaryMode::ZeroOneBoundary, 3).unwrap();
        assert_eq!(boundary_labels(&labels, &cfg2).ids(), &[1, IGNORE, 1]);
    }

    #[test]
    fn epsilon_zero_rejected() {
        assert!(BoundaryConfig::new(0, BoundaryMode::ClassBoundary, 3).is_err());
    }

    #[test]
    fn downsample_identity_and_checkerboard() {
        let map = two_columns();
        assert_eq!(downsample_labels(&map, 1).unwrap(), map);
        let board = LabelMap::new(8, 8, (0..64).map(|i| (((i / 8) / 2 + (i % 8) / 2) % 2) as u8).collect()).unwrap();
        let small = downsample_labels(&board, 2).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(small.get(y, x), ((y + x) % 2) as u8);
            }
        }
        assert!(downsample_labels(&board, 3).is_err());
    }

    #[test]
    fn validation_report() {
        let map = LabelMap::new(2, 3, vec![0, 1, 1, 2, IGNORE, 3]).unwrap();
        let ok = validate_labels(&map, 4);
        assert!(ok.is_valid());
        assert_eq!(ok.class_counts, vec![1, 2, 1, 1]);
        assert!((ok.ignore_fraction - 1.0 / 6.0).abs() < 1e-12);
        let bad = validate_labels(&map, 3);
        assert_eq!(bad.violations.get(&3), Some(&1));
    }
}
