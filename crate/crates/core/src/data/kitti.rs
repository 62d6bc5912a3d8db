//! KITTI text formats: calibration, label lines and result lines.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D};

pub const IMAGE_WIDTH: f64 = 1242.0;
pub const IMAGE_HEIGHT: f64 = 375.0;

pub const LABEL_FIELDS: usize = 15;
pub const RESULT_FIELDS: usize = 16;

/// Camera and LiDAR extrinsics of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Calib {
    pub p2: Matrix3x4<f64>,
    pub r0_rect: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

fn parse_row<const N: usize>(path: &Path, line: usize, key: &str, text: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{key}: {e}"),
        })?;
    vals.try_into().map_err(|v: Vec<f64>| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("{key}: expected {N} values, found {}", v.len()),
    })
}

fn fmt_values(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

impl Calib {
    /// LiDAR `(x fwd, y left, z up)` to camera `(x right, y down, z fwd)` with no
    /// offset, and typical KITTI intrinsics.
    pub fn synthetic() -> Self {
        Calib {
            p2: Matrix3x4::new(
                721.5377, 0.0, 609.5593, 0.0, 0.0, 721.5377, 172.854, 0.0, 0.0, 0.0, 1.0, 0.0,
            ),
            r0_rect: Matrix3::identity(),
            tr_velo_to_cam: Matrix3x4::new(0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (mut p2, mut r0, mut tr) = (None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let Some((key, rest)) = raw.split_once(':') else {
                continue;
            };
            match key.trim() {
                "P2" => p2 = Some(Matrix3x4::from_row_slice(&parse_row::<12>(path, i + 1, "P2", rest)?)),
                "R0_rect" => r0 = Some(Matrix3::from_row_slice(&parse_row::<9>(path, i + 1, "R0_rect", rest)?)),
                "Tr_velo_to_cam" => {
                    tr = Some(Matrix3x4::from_row_slice(&parse_row::<12>(
                        path,
                        i + 1,
                        "Tr_velo_to_cam",
                        rest,
                    )?))
                }
                _ => {}
            }
        }
        let missing = |k: &str| Error::Format {
            path: path.to_path_buf(),
            message: format!("calibration lacks {k}"),
        };
        Ok(Calib {
            p2: p2.ok_or_else(|| missing("P2"))?,
            r0_rect: r0.ok_or_else(|| missing("R0_rect"))?,
            tr_velo_to_cam: tr.ok_or_else(|| missing("Tr_velo_to_cam"))?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let zero3x4 = fmt_values(std::iter::repeat_n(0.0, 12));
        let rows34 = |m: &Matrix3x4<f64>| fmt_values((0..3).flat_map(|r| (0..4).map(move |c| m[(r, c)])));
        let rows33 = |m: &Matrix3<f64>| fmt_values((0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])));
        format!(
            "P0: {zero3x4}\nP1: {zero3x4}\nP2: {}\nP3: {zero3x4}\nR0_rect: {}\nTr_velo_to_cam: {}\nTr_imu_to_velo: {zero3x4}\n",
            rows34(&self.p2),
            rows33(&self.r0_rect),
            rows34(&self.tr_velo_to_cam)
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    fn velo_to_rect_affine(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let t = self.tr_velo_to_cam.column(3).into_owned();
        (self.r0_rect * r, self.r0_rect * t)
    }

    pub fn velo_to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let (a, b) = self.velo_to_rect_affine();
        let q = a * Vector3::from(p) + b;
        [q.x, q.y, q.z]
    }

    pub fn rect_to_velo(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let (a, b) = self.velo_to_rect_affine();
        let inv = a
            .try_inverse()
            .ok_or_else(|| Error::Numeric("calibration is not invertible".into()))?;
        let q = inv * (Vector3::from(p) - b);
        Ok([q.x, q.y, q.z])
    }

    /// Pixel coordinates, or `None` behind the image plane.
    pub fn project_rect(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let h = self.p2 * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
        (h.z > 1e-6).then(|| [h.x / h.z, h.y / h.z])
    }
}

/// One label or result line, field for field.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiRecord {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox2d: [f64; 4],
    /// `(h, w, l)`.
    pub dims: [f64; 3],
    /// Bottom center in rectified camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl KittiRecord {
    pub fn parse_line(line: &str, path: &Path, line_no: usize) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if fields.len() != LABEL_FIELDS && fields.len() != RESULT_FIELDS {
            return Err(err(format!(
                "expected {LABEL_FIELDS} or {RESULT_FIELDS} fields, found {}",
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| err(format!("field {}: {e}", i + 1)))
        };
        let occlusion = fields[2]
            .parse::<i32>()
            .or_else(|_| fields[2].parse::<f64>().map(|v| v as i32))
            .map_err(|e| err(format!("field 3: {e}")))?;
        Ok(KittiRecord {
            class: fields[0].to_string(),
            truncation: num(1)?,
            occlusion,
            alpha: num(3)?,
            bbox2d: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if fields.len() == RESULT_FIELDS {
                Some(num(15)?)
            } else {
                None
            },
        })
    }

    /// Shortest round-trip decimal for every float, so parsing recovers the bits.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.class,
            self.truncation,
            self.occlusion,
            self.alpha,
            self.bbox2d[0],
            self.bbox2d[1],
            self.bbox2d[2],
            self.bbox2d[3],
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y
        );
        if let Some(score) = self.score {
            s.push_str(&format!(" {score}"));
        }
        s
    }

    /// LiDAR-frame box: the camera bottom center lifted by half the height, and
    /// yaw `-ry - π/2`.
    pub fn to_box(&self, calib: &Calib) -> Result<Box3D> {
        let [h, w, l] = self.dims;
        let c = calib.rect_to_velo(self.location)?;
        Ok(Box3D::new(
            c[0],
            c[1],
            c[2] + h / 2.0,
            l,
            w,
            h,
            normalize_angle(-self.rotation_y - FRAC_PI_2),
        ))
    }

    /// Inverse of [`to_box`](Self::to_box), with `alpha` and the image box filled
    /// in from the projection.
    pub fn from_box(class: &str, b: &Box3D, calib: &Calib, score: Option<f64>) -> Self {
        let location = calib.velo_to_rect([b.x, b.y, b.z - b.h / 2.0]);
        let rotation_y = normalize_angle(-b.theta - FRAC_PI_2);
        let alpha = normalize_angle(rotation_y - location[0].atan2(location[2]));
        KittiRecord {
            class: class.to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha,
            bbox2d: image_box(b, calib),
            dims: [b.h, b.w, b.l],
            location,
            rotation_y,
            score,
        }
    }
}

/// Image-clipped bounds of the projected corners; zeros when any corner is behind the camera.
pub fn image_box(b: &Box3D, calib: &Calib) -> [f64; 4] {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in b.bev_corners() {
        for z in [b.z_min(), b.z_max()] {
            let Some(px) = calib.project_rect(calib.velo_to_rect([c[0], c[1], z])) else {
                return [0.0; 4];
            };
            for k in 0..2 {
                lo[k] = lo[k].min(px[k]);
                hi[k] = hi[k].max(px[k]);
            }
        }
    }
    [
        lo[0].clamp(0.0, IMAGE_WIDTH - 1.0),
        lo[1].clamp(0.0, IMAGE_HEIGHT - 1.0),
        hi[0].clamp(0.0, IMAGE_WIDTH - 1.0),
        hi[1].clamp(0.0, IMAGE_HEIGHT - 1.0),
    ]
}

pub fn parse_records(text: &str, path: &Path) -> Result<Vec<KittiRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| KittiRecord::parse_line(l, path, i + 1))
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<KittiRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text, path)
}

pub fn write_records(path: &Path, records: &[KittiRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn label_fields() {
        let r = KittiRecord::parse_line(LINE, Path::new("l.txt"), 1).unwrap();
        assert_eq!(r.class, "Car");
        assert_eq!(r.dims, [1.65, 1.67, 3.64]);
        assert_eq!(r.score, None);
    }

    #[test]
    fn wrong_field_count_reports_line() {
        let err = parse_records("Car 0 0\n", Path::new("l.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn result_line_round_trip() {
        let mut r = KittiRecord::parse_line(LINE, Path::new("l.txt"), 1).unwrap();
        r.score = Some(0.123456789012345);
        r.alpha = 1.0 / 3.0;
        let back = KittiRecord::parse_line(&r.to_line(), Path::new("r.txt"), 1).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_line(), r.to_line());
    }

    #[test]
    fn synthetic_calibration_maps_axes() {
        let c = Calib::synthetic();
        // 10 m ahead, 2 m left, 1 m up in LiDAR is 2 m left (x = -2), 1 m up (y = -1), 10 m ahead in camera
        assert_eq!(c.velo_to_rect([10.0, 2.0, 1.0]), [-2.0, -1.0, 10.0]);
        assert_eq!(c.rect_to_velo([-2.0, -1.0, 10.0]).unwrap(), [10.0, 2.0, 1.0]);
    }

    #[test]
    fn camera_origin_box() {
        // bottom center at the camera origin sits at the LiDAR origin; center lifted by h/2
        let r = KittiRecord::parse_line("Car 0 0 0 0 0 0 0 1.5 1.6 3.9 0 0 0 0", Path::new("l.txt"), 1).unwrap();
        let b = r.to_box(&Calib::synthetic()).unwrap();
        assert_eq!([b.x, b.y, b.z], [0.0, 0.0, 0.75]);
        assert!((b.theta + FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn box_round_trip_through_camera_frame() {
        let c = Calib::synthetic();
        let b = Box3D::new(12.5, -3.25, -0.95, 3.9, 1.6, 1.56, 0.4);
        let back = KittiRecord::from_box("Car", &b, &c, None).to_box(&c).unwrap();
        for (u, v) in [(b.x, back.x), (b.y, back.y), (b.z, back.z), (b.theta, back.theta)] {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_text_round_trip() {
        let c = Calib::synthetic();
        assert_eq!(Calib::parse(&c.to_text(), Path::new("c.txt")).unwrap(), c);
    }
}
