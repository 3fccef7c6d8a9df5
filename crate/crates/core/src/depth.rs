//! Per-camera depth maps: synthetic rendering from ground-truth boxes, box
//! depth extraction, and the `.dpm` file format.
//!
//! `.dpm` layout (all little-endian):
//!
//! | offset | size  | field                         |
//! |--------|-------|-------------------------------|
//! | 0      | 4     | magic `DPM1`                  |
//! | 4      | 4     | width (u32)                   |
//! | 8      | 4     | height (u32)                  |
//! | 12     | 4     | reserved, must be 0           |
//! | 16     | 4·W·H | f32 depths, row-major, +inf = background |

use std::path::Path;

use thiserror::Error;

use crate::geometry::{project_box, Box2D, Box3D, Camera};

pub const MAGIC: &[u8; 4] = b"DPM1";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("no finite depth inside box")]
    NoDepth,
    #[error("depth file format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("depth map is {got_w}x{got_h}, camera {camera} expects {want_w}x{want_h}")]
    DimensionMismatch {
        camera: String,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("invalid depth value {value} at pixel {index}")]
    InvalidValue { index: usize, value: f32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthMap {
    /// All-background map.
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            values: vec![f32::INFINITY; width as usize * height as usize],
        }
    }

    pub fn from_values(width: u32, height: u32, values: Vec<f32>) -> Result<Self, DepthError> {
        if values.len() != width as usize * height as usize {
            return Err(DepthError::Format {
                offset: HEADER_LEN,
                reason: format!("{} values for {}x{}", values.len(), width, height),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0) || v.is_nan() || **v == f32::NEG_INFINITY)
        {
            return Err(DepthError::InvalidValue { index, value });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    pub fn check_camera(&self, cam: &Camera) -> Result<(), DepthError> {
        if self.width != cam.width || self.height != cam.height {
            return Err(DepthError::DimensionMismatch {
                camera: cam.id.clone(),
                got_w: self.width,
                got_h: self.height,
                want_w: cam.width,
                want_h: cam.height,
            });
        }
        Ok(())
    }

    /// Inclusive pixel ranges whose centers fall inside the box, clipped to
    /// the image. `None` when no pixel center is covered.
    fn pixel_span(&self, b: &Box2D) -> Option<(u32, u32, u32, u32)> {
        let span = |lo: f64, hi: f64, n: u32| {
            let a = (lo - 0.5).ceil().max(0.0);
            let z = (hi - 0.5).floor().min(n as f64 - 1.0);
            (a <= z).then_some((a as u32, z as u32))
        };
        let (x0, x1) = span(b.x_min(), b.x_max(), self.width)?;
        let (y0, y1) = span(b.y_min(), b.y_max(), self.height)?;
        Some((x0, x1, y0, y1))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DepthError> {
        let fmt = |offset: usize, reason: &str| DepthError::Format {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(0, "bad magic"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let (width, height, reserved) = (word(4), word(8), word(12));
        if width == 0 || height == 0 {
            return Err(fmt(4, "zero dimension"));
        }
        if reserved != 0 {
            return Err(fmt(12, "reserved field must be zero"));
        }
        let n = width as usize * height as usize;
        let want = HEADER_LEN + 4 * n;
        if bytes.len() < want {
            return Err(fmt(bytes.len(), "truncated pixel data"));
        }
        if bytes.len() > want {
            return Err(fmt(want, "trailing bytes"));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(width, height, values)
    }

    pub fn write(&self, path: &Path) -> Result<(), DepthError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| DepthError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn load_depth_map(path: &Path) -> Result<DepthMap, DepthError> {
    let bytes = std::fs::read(path).map_err(|source| DepthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    DepthMap::from_bytes(&bytes)
}

/// Fills each visible box's projected hull with its center depth, keeping the
/// nearest value per pixel.
pub fn render_synthetic_depth(boxes: &[Box3D], cam: &Camera) -> DepthMap {
    let mut map = DepthMap::empty(cam.width, cam.height);
    for b in boxes {
        let Ok(bb) = project_box(cam, b) else { continue };
        let Some((x0, x1, y0, y1)) = map.pixel_span(&bb) else { continue };
        let d = bb.depth as f32;
        let w = map.width as usize;
        for y in y0..=y1 {
            let row = &mut map.values[y as usize * w..(y as usize + 1) * w];
            for v in &mut row[x0 as usize..=x1 as usize] {
                if d < *v {
                    *v = d;
                }
            }
        }
    }
    map
}

/// Median of the finite depths under the box (mean of the middle two for an
/// even count).
pub fn box_depth_from_map(map: &DepthMap, b: &Box2D) -> Result<f64, DepthError> {
    let (x0, x1, y0, y1) = map.pixel_span(b).ok_or(DepthError::NoDepth)?;
    let mut vals: Vec<f32> = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let v = map.get(x, y);
            if v.is_finite() {
                vals.push(v);
            }
        }
    }
    median(&mut vals).ok_or(DepthError::NoDepth)
}

fn median(vals: &mut [f32]) -> Option<f64> {
    if vals.is_empty() {
        return None;
    }
    vals.sort_unstable_by(f32::total_cmp);
    let n = vals.len();
    Some(if n % 2 == 1 {
        vals[n / 2] as f64
    } else {
        (vals[n / 2 - 1] as f64 + vals[n / 2] as f64) / 2.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, RigidTransform, Vec3};

    fn cam() -> Camera {
        Camera::new(
            "c",
            Intrinsics::new(100.0, 100.0, 50.0, 40.0).unwrap(),
            RigidTransform::IDENTITY,
            100,
            80,
        )
        .unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let m = render_synthetic_depth(&[], &cam());
        assert!(m.values().iter().all(|v| *v == f32::INFINITY));
    }

    #[test]
    fn single_box_fills_constant() {
        let c = cam();
        let b = Box3D::new(Vec3::new(0.0, 0.0, 10.0), [2.0, 2.0, 2.0], 0.0);
        let m = render_synthetic_depth(&[b], &c);
        let bb = project_box(&c, &b).unwrap();
        let (x0, x1, y0, y1) = m.pixel_span(&bb).unwrap();
        for y in y0..=y1 {
            for x in x0..=x1 {
                assert_eq!(m.get(x, y), 10.0);
            }
        }
        assert_eq!(m.get(0, 0), f32::INFINITY);
        assert_eq!(box_depth_from_map(&m, &bb).unwrap(), 10.0);
    }

    #[test]
    fn nearest_wins_in_overlap() {
        let c = cam();
        let far = Box3D::new(Vec3::new(0.0, 0.0, 10.0), [2.0, 2.0, 2.0], 0.0);
        let near = Box3D::new(Vec3::new(0.3, 0.0, 5.0), [1.0, 1.0, 1.0], 0.0);
        let m = render_synthetic_depth(&[far, near], &c);
        let m2 = render_synthetic_depth(&[near, far], &c);
        assert_eq!(m, m2);
        assert_eq!(m.get(53, 40), 5.0);
        // far-only pixel
        let bb = project_box(&c, &far).unwrap();
        assert_eq!(m.get(bb.x_min().ceil() as u32, 40), 10.0);
    }

    #[test]
    fn median_conventions() {
        let mut m = DepthMap::empty(4, 2);
        for x in 0..4 {
            m.values[x] = 5.0;
            m.values[4 + x] = 15.0;
        }
        let all = Box2D::new(2.0, 1.0, 4.0, 2.0, 1.0).unwrap();
        assert_eq!(box_depth_from_map(&m, &all).unwrap(), 10.0);
        let bg = DepthMap::empty(4, 2);
        assert!(matches!(box_depth_from_map(&bg, &all), Err(DepthError::NoDepth)));
        let uniform = DepthMap::from_values(4, 2, vec![10.0; 8]).unwrap();
        assert_eq!(box_depth_from_map(&uniform, &all).unwrap(), 10.0);
        // no pixel center covered
        let sliver = Box2D::new(1.0, 1.0, 0.2, 0.2, 1.0).unwrap();
        assert!(matches!(box_depth_from_map(&uniform, &sliver), Err(DepthError::NoDepth)));
    }

    #[test]
    fn median_ignores_order() {
        let mut a = vec![3.0f32, 1.0, 7.0, 2.0, 9.0, 4.0];
        let mut b = vec![9.0f32, 4.0, 2.0, 3.0, 7.0, 1.0];
        assert_eq!(median(&mut a), median(&mut b));
    }

    #[test]
    fn byte_round_trip_and_errors() {
        let c = cam();
        let b = Box3D::new(Vec3::new(0.0, 0.0, 10.0), [2.0, 2.0, 2.0], 0.3);
        let m = render_synthetic_depth(&[b], &c);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"DPM1");
        assert_eq!(DepthMap::from_bytes(&bytes).unwrap(), m);

        let err = DepthMap::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, DepthError::Format { offset, .. } if offset == bytes.len() - 3));
        let err = DepthMap::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, DepthError::Format { offset: 10, .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DepthMap::from_bytes(&bad), Err(DepthError::Format { offset: 0, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(DepthMap::from_bytes(&extra), Err(DepthError::Format { .. })));
    }

    #[test]
    fn dimension_mismatch_detected() {
        let m = DepthMap::empty(10, 10);
        assert!(matches!(m.check_camera(&cam()), Err(DepthError::DimensionMismatch { .. })));
    }
}
