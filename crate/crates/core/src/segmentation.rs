//! Depth-frame segmentation: range thresholding, background subtraction,
//! median smoothing and connected-component blob extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, DepthFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(format!("connectivity must be 4 or 8, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    /// Accepted depth range of the target frame, meters (inclusive).
    pub fg_range: (f64, f64),
    /// Range kept in the background model, meters (inclusive).
    pub bg_range: (f64, f64),
    /// Pixels within this many millimeters of the background are removed.
    pub bg_tolerance: u16,
    pub median_window: usize,
    /// Accepted blob area in pixels (inclusive).
    pub blob_area: (usize, usize),
    pub connectivity: Connectivity,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            fg_range: (2.0, 3.4),
            bg_range: (1.0, 3.8),
            bg_tolerance: 100,
            median_window: 4,
            blob_area: (8000, 22000),
            connectivity: Connectivity::Eight,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fg_range.0 < self.fg_range.1) || !(self.bg_range.0 < self.bg_range.1) {
            return Err(Error::InvalidParam("depth ranges need lo < hi".into()));
        }
        if self.median_window == 0 {
            return Err(Error::InvalidParam("median_window must be at least 1".into()));
        }
        if self.blob_area.0 >= self.blob_area.1 {
            return Err(Error::InvalidParam("blob_area needs lo < hi".into()));
        }
        Ok(())
    }
}

/// Zeroes every pixel whose depth lies outside `[lo, hi]` meters.
pub fn threshold_depth(frame: &DepthFrame, range: (f64, f64)) -> DepthFrame {
    let (lo, hi) = range;
    let data = frame
        .data()
        .iter()
        .map(|&d| {
            let m = f64::from(d) / 1000.0;
            if d != 0 && lo <= m && m <= hi {
                d
            } else {
                0
            }
        })
        .collect();
    frame.with_data(data)
}

/// Removes pixels that match a known background measurement to within
/// `tolerance` millimeters. Pixels with no background measurement pass.
pub fn subtract_background(
    frame: &DepthFrame,
    background: &DepthFrame,
    tolerance: u16,
) -> Result<DepthFrame> {
    if !frame.same_shape(background) {
        return Err(Error::DimensionMismatch(format!(
            "frame {}x{} vs background {}x{}",
            frame.width(),
            frame.height(),
            background.width(),
            background.height()
        )));
    }
    let data = frame
        .data()
        .iter()
        .zip(background.data())
        .map(|(&f, &b)| if b != 0 && f.abs_diff(b) <= tolerance { 0 } else { f })
        .collect();
    Ok(frame.with_data(data))
}

/// Window x window median with edge replication.
///
/// The output pixel sits at offset `ceil(w/2) - 1` inside its window, so odd
/// windows are centered and even windows extend one further right/down. For
/// even sample counts the lower of the two middle values is taken.
pub fn median_filter(frame: &DepthFrame, window: usize) -> DepthFrame {
    if window <= 1 {
        return frame.clone();
    }
    let (w, h) = (frame.width() as isize, frame.height() as isize);
    let anchor = (window as isize + 1) / 2 - 1;
    let rank = (window * window - 1) / 2;
    let mut buf = vec![0u16; window * window];
    let mut out = vec![0u16; frame.data().len()];
    for v in 0..h {
        for u in 0..w {
            let mut i = 0;
            for dv in 0..window as isize {
                let y = (v - anchor + dv).clamp(0, h - 1) as usize;
                for du in 0..window as isize {
                    let x = (u - anchor + du).clamp(0, w - 1) as usize;
                    buf[i] = frame.get(x, y);
                    i += 1;
                }
            }
            let (_, m, _) = buf.select_nth_unstable(rank);
            out[(v * w + u) as usize] = *m;
        }
    }
    frame.with_data(out)
}

/// Connected components of nonzero pixels. Returns a per-pixel label
/// (0 = background, components numbered from 1 in raster order of their
/// first pixel) and the number of components.
pub fn label_components(frame: &DepthFrame, connectivity: Connectivity) -> (Vec<u32>, usize) {
    let (w, h) = (frame.width(), frame.height());
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ],
    };
    for start in 0..w * h {
        if frame.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (u, v) = ((p % w) as isize, (p / w) as isize);
            for &(du, dv) in offsets {
                let (x, y) = (u + du, v + dv);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let q = y as usize * w + x as usize;
                if frame.data()[q] != 0 && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
    }
    (labels, next as usize)
}

/// A component accepted by [`extract_blobs`] together with its pixel label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blob {
    pub bbox: BoundingBox,
    pub label: u32,
}

fn blobs_with_labels(frame: &DepthFrame, params: &SegmentationParams) -> (Vec<u32>, Vec<Blob>) {
    let (labels, count) = label_components(frame, params.connectivity);
    let w = frame.width();
    let mut boxes = vec![
        BoundingBox {
            u_min: usize::MAX,
            v_min: usize::MAX,
            u_max: 0,
            v_max: 0,
            area: 0,
        };
        count
    ];
    for (p, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let b = &mut boxes[l as usize - 1];
        let (u, v) = (p % w, p / w);
        b.u_min = b.u_min.min(u);
        b.v_min = b.v_min.min(v);
        b.u_max = b.u_max.max(u + 1);
        b.v_max = b.v_max.max(v + 1);
        b.area += 1;
    }
    let (lo, hi) = params.blob_area;
    let mut blobs: Vec<Blob> = boxes
        .into_iter()
        .enumerate()
        .filter(|(_, b)| lo <= b.area && b.area <= hi)
        .map(|(i, bbox)| Blob {
            bbox,
            label: i as u32 + 1,
        })
        .collect();
    blobs.sort_by(|a, b| {
        b.bbox
            .area
            .cmp(&a.bbox.area)
            .then(a.bbox.v_min.cmp(&b.bbox.v_min))
            .then(a.bbox.u_min.cmp(&b.bbox.u_min))
    });
    (labels, blobs)
}

/// Bounding boxes of components whose area lies in `params.blob_area`,
/// largest first, ties by `(v_min, u_min)`.
pub fn extract_blobs(frame: &DepthFrame, params: &SegmentationParams) -> Vec<BoundingBox> {
    blobs_with_labels(frame, params)
        .1
        .into_iter()
        .map(|b| b.bbox)
        .collect()
}

/// A segmented animal: millimeter depths inside its box, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub depth: DepthFrame,
    pub bbox: BoundingBox,
}

/// Full pipeline: threshold, background subtraction, median filter, blob
/// extraction and cropping.
///
/// Crop pixels outside their own component are zeroed, so a box that
/// overlaps a neighbouring animal carries only its own depths.
pub fn segment_frame(
    frame: &DepthFrame,
    background: &DepthFrame,
    params: &SegmentationParams,
) -> Result<Vec<Crop>> {
    params.validate()?;
    let fg = threshold_depth(frame, params.fg_range);
    let bg = threshold_depth(background, params.bg_range);
    let isolated = subtract_background(&fg, &bg, params.bg_tolerance)?;
    let smooth = median_filter(&isolated, params.median_window);
    let (labels, blobs) = blobs_with_labels(&smooth, params);
    let w = frame.width();
    Ok(blobs
        .into_iter()
        .map(|blob| {
            let b = blob.bbox;
            let mut data = Vec::with_capacity(b.width() * b.height());
            for v in b.v_min..b.v_max {
                for u in b.u_min..b.u_max {
                    let keep = labels[v * w + u] == blob.label;
                    data.push(if keep { smooth.get(u, v) } else { 0 });
                }
            }
            let depth = DepthFrame::new(
                b.width(),
                b.height(),
                data,
                frame.sequence_id.clone(),
                frame.frame_index,
            )
            .expect("crop dimensions match box");
            Crop { depth, bbox: b }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(w: usize, h: usize, data: Vec<u16>) -> DepthFrame {
        DepthFrame::new(w, h, data, "t", 0).unwrap()
    }

    fn fill_rect(f: &mut DepthFrame, u0: usize, v0: usize, w: usize, h: usize, d: u16) {
        for v in v0..v0 + h {
            for u in u0..u0 + w {
                f.set(u, v, d);
            }
        }
    }

    #[test]
    fn threshold_bounds_are_inclusive() {
        let f = frame(5, 1, vec![0, 2500, 1999, 2000, 3400]);
        let t = threshold_depth(&f, (2.0, 3.4));
        assert_eq!(t.data(), &[0, 2500, 0, 2000, 3400]);
        let far = frame(2, 2, vec![3500; 4]);
        assert_eq!(threshold_depth(&far, (2.0, 3.4)).valid_count(), 0);
        let z = frame(3, 3, vec![0; 9]);
        assert_eq!(threshold_depth(&z, (2.0, 3.4)), z);
    }

    #[test]
    fn background_subtraction_rules() {
        let f = frame(3, 1, vec![2500, 3000, 3050]);
        let empty = frame(3, 1, vec![0; 3]);
        assert_eq!(subtract_background(&f, &empty, 100).unwrap(), f);
        assert_eq!(subtract_background(&f, &f, 100).unwrap().valid_count(), 0);

        let floor = frame(3, 1, vec![3800, 3800, 3000]);
        let out = subtract_background(&f, &floor, 100).unwrap();
        // |2500-3800| and |3000-3800| exceed the tolerance; |3050-3000| does not.
        assert_eq!(out.data(), &[2500, 3000, 0]);

        assert!(subtract_background(&f, &frame(1, 3, vec![0; 3]), 100).is_err());
    }

    #[test]
    fn median_window_one_and_constant_frames() {
        let f = frame(3, 2, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(median_filter(&f, 1), f);
        let c = frame(6, 5, vec![2222; 30]);
        for w in 1..=5 {
            assert_eq!(median_filter(&c, w), c);
        }
    }

    #[test]
    fn isolated_pixel_is_suppressed() {
        // Every 3x3 window holds at most one nonzero value out of nine,
        // so the median (5th smallest) is always zero.
        let mut f = frame(5, 5, vec![0; 25]);
        f.set(2, 2, 2500);
        assert_eq!(median_filter(&f, 3).valid_count(), 0);
    }

    #[test]
    fn single_hole_is_filled() {
        let mut f = frame(5, 5, vec![2500; 25]);
        f.set(2, 2, 0);
        assert_eq!(median_filter(&f, 3).valid_count(), 25);
    }

    #[test]
    fn even_window_anchor_and_lower_median() {
        // 1D-in-practice check on a 4x1 frame with window 2: output at u sees
        // rows clamp(-0..1) and columns u..u+1 (anchor 0), giving 4 samples.
        let f = frame(4, 1, vec![10, 20, 30, 40]);
        let out = median_filter(&f, 2);
        // Window for u=0: {10,20,10,20} -> lower middle of [10,10,20,20] = 10.
        // u=3: {40,40,40,40} (edge replication) -> 40.
        assert_eq!(out.data(), &[10, 20, 30, 40]);

        // Window 4 anchors at offset 1: columns u-1..u+2.
        let g = frame(5, 1, vec![1, 2, 3, 4, 5]);
        let out = median_filter(&g, 4);
        // u=0: cols {0,0,1,2} -> values {1,1,2,3}, 4 rows replicated; lower middle of
        // 16 samples (four each) is the 8th smallest = 1.
        assert_eq!(out.get(0, 0), 1);
        // u=2: cols {1,2,3,4} -> {2,3,4,5}; 8th smallest = 3.
        assert_eq!(out.get(2, 0), 3);
    }

    #[test]
    fn blobs_respect_area_bounds() {
        let params = SegmentationParams::default();
        assert!(extract_blobs(&frame(10, 10, vec![0; 100]), &params).is_empty());

        let mut f = DepthFrame::zeros(300, 200);
        fill_rect(&mut f, 10, 10, 100, 100, 2500);
        let boxes = extract_blobs(&f, &params);
        assert_eq!(boxes.len(), 1);
        assert_eq!(
            boxes[0],
            BoundingBox {
                u_min: 10,
                v_min: 10,
                u_max: 110,
                v_max: 110,
                area: 10_000
            }
        );

        fill_rect(&mut f, 200, 50, 25, 20, 2500);
        let boxes = extract_blobs(&f, &params);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].area, 10_000);
    }

    #[test]
    fn blobs_sorted_by_area_then_position() {
        let params = SegmentationParams {
            blob_area: (1, 1000),
            ..Default::default()
        };
        let mut f = DepthFrame::zeros(40, 40);
        fill_rect(&mut f, 30, 0, 3, 3, 1); // area 9, top right
        fill_rect(&mut f, 0, 20, 3, 3, 1); // area 9, lower
        fill_rect(&mut f, 0, 0, 5, 5, 1); // area 25
        fill_rect(&mut f, 10, 0, 3, 3, 1); // area 9, top middle
        let b = extract_blobs(&f, &params);
        let keys: Vec<_> = b.iter().map(|b| (b.area, b.v_min, b.u_min)).collect();
        assert_eq!(keys, vec![(25, 0, 0), (9, 0, 10), (9, 0, 30), (9, 20, 0)]);
    }

    #[test]
    fn diagonal_touch_depends_on_connectivity() {
        let mut f = DepthFrame::zeros(4, 4);
        f.set(0, 0, 1);
        f.set(1, 1, 1);
        assert_eq!(label_components(&f, Connectivity::Eight).1, 1);
        assert_eq!(label_components(&f, Connectivity::Four).1, 2);
    }

    #[test]
    fn segment_background_only_is_empty() {
        let mut bg = DepthFrame::zeros(200, 150);
        fill_rect(&mut bg, 0, 0, 200, 150, 3700);
        fill_rect(&mut bg, 0, 10, 200, 60, 3000);
        let params = SegmentationParams::default();
        assert!(segment_frame(&bg, &bg, &params).unwrap().is_empty());
    }

    #[test]
    fn segment_crop_keeps_component_depths() {
        let mut bg = DepthFrame::zeros(300, 200);
        fill_rect(&mut bg, 0, 0, 300, 200, 3700);
        let mut f = bg.clone();
        fill_rect(&mut f, 50, 40, 100, 100, 2500);
        f.set(60, 50, 2600);
        let crops = segment_frame(&f, &bg, &SegmentationParams::default()).unwrap();
        assert_eq!(crops.len(), 1);
        let c = &crops[0];
        assert_eq!((c.bbox.u_min, c.bbox.v_min), (50, 40));
        assert_eq!(c.depth.get(0, 0), 2500);
        assert!(c.depth.data().iter().all(|&d| d == 2500));
    }

    proptest! {
        #[test]
        fn threshold_is_idempotent(data in proptest::collection::vec(0u16..5000, 36)) {
            let f = frame(6, 6, data);
            let once = threshold_depth(&f, (2.0, 3.4));
            prop_assert_eq!(threshold_depth(&once, (2.0, 3.4)), once);
        }

        #[test]
        fn narrowing_range_never_adds_pixels(
            data in proptest::collection::vec(0u16..5000, 36),
            shrink_lo in 0.0f64..0.6,
            shrink_hi in 0.0f64..0.6,
        ) {
            let f = frame(6, 6, data);
            let wide = threshold_depth(&f, (2.0, 3.4));
            let narrow = threshold_depth(&f, (2.0 + shrink_lo, 3.4 - shrink_hi));
            for (n, w) in narrow.data().iter().zip(wide.data()) {
                prop_assert!(*n == 0 || *w != 0);
            }
        }

        #[test]
        fn accepted_pixels_lie_in_their_box(data in proptest::collection::vec(prop_oneof![Just(0u16), Just(2500u16)], 144)) {
            let f = frame(12, 12, data);
            let params = SegmentationParams { blob_area: (1, 144), ..Default::default() };
            let (labels, blobs) = blobs_with_labels(&f, &params);
            let total: usize = blobs.iter().map(|b| b.bbox.area).sum();
            prop_assert_eq!(total, f.valid_count());
            for blob in &blobs {
                for (p, &l) in labels.iter().enumerate() {
                    if l == blob.label {
                        prop_assert!(blob.bbox.contains(p % 12, p / 12));
                    }
                }
            }
        }
    }
}
