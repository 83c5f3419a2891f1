//! COLMAP sparse models in the text format (`cameras.txt`, `images.txt`,
//! `points3D.txt`).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scene::PointSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
    /// Accepted only with a zero distortion coefficient.
    SimpleRadial,
}

impl CameraModel {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "SIMPLE_PINHOLE" => Ok(CameraModel::SimplePinhole),
            "PINHOLE" => Ok(CameraModel::Pinhole),
            "SIMPLE_RADIAL" => Ok(CameraModel::SimpleRadial),
            other => Err(Error::UnsupportedCamera(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
            CameraModel::SimpleRadial => "SIMPLE_RADIAL",
        }
    }

    fn param_count(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
            CameraModel::SimpleRadial => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: CameraModel,
    pub width: usize,
    pub height: usize,
    pub params: Vec<f64>,
}

impl ColmapCamera {
    /// `(fx, fy, cx, cy)`.
    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        let p = &self.params;
        match self.model {
            CameraModel::Pinhole => (p[0], p[1], p[2], p[3]),
            CameraModel::SimplePinhole | CameraModel::SimpleRadial => (p[0], p[0], p[1], p[2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// World-to-camera rotation `[w, x, y, z]`.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
    /// `(x, y, point3d_id)`; `-1` marks an untriangulated observation.
    pub points2d: Vec<(f64, f64, i64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    /// `(image_id, point2d_index)` pairs.
    pub track: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColmapModel {
    pub cameras: Vec<ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

impl ColmapModel {
    pub fn camera(&self, id: u32) -> Option<&ColmapCamera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    /// Pinhole camera of an image of this model.
    pub fn image_camera(&self, image: &ColmapImage) -> Result<Camera> {
        let cam = self
            .camera(image.camera_id)
            .ok_or_else(|| Error::invalid(format!("image {} references missing camera {}", image.id, image.camera_id)))?;
        let (fx, fy, cx, cy) = cam.intrinsics();
        Camera::from_quaternion(fx, fy, cx, cy, cam.width, cam.height, image.qvec, image.tvec)
    }

    pub fn point_set(&self) -> PointSet {
        PointSet {
            positions: self.points.iter().map(|p| Vector3::from(p.xyz)).collect(),
            colors: self
                .points
                .iter()
                .map(|p| Vector3::new(p.rgb[0] as f64, p.rgb[1] as f64, p.rgb[2] as f64) / 255.0)
                .collect(),
        }
    }
}

struct Lines<'a> {
    file: &'a str,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(file: &'a str, text: &'a str) -> Self {
        Lines {
            file,
            iter: text.lines().enumerate(),
        }
    }

    /// Next line that is not a comment or blank, with its 1-based number.
    fn next_data(&mut self) -> Option<(usize, &'a str)> {
        self.iter
            .by_ref()
            .map(|(i, l)| (i + 1, l.trim()))
            .find(|(_, l)| !l.is_empty() && !l.starts_with('#'))
    }

    /// The line right after the current one, which may be empty.
    fn next_raw(&mut self) -> Option<(usize, &'a str)> {
        self.iter.next().map(|(i, l)| (i + 1, l.trim()))
    }

    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            line,
            message: message.into(),
        }
    }
}

fn field<T: std::str::FromStr>(lines: &Lines, line: usize, tok: Option<&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| lines.err(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| lines.err(line, format!("invalid {what} `{tok}`")))
}

pub fn parse_cameras(text: &str) -> Result<Vec<ColmapCamera>> {
    let mut lines = Lines::new("cameras.txt", text);
    let mut out = Vec::new();
    while let Some((n, l)) = lines.next_data() {
        let mut t = l.split_whitespace();
        let id = field(&lines, n, t.next(), "camera id")?;
        let model_name: String = field(&lines, n, t.next(), "camera model")?;
        let model = CameraModel::parse(&model_name)?;
        let width = field(&lines, n, t.next(), "width")?;
        let height = field(&lines, n, t.next(), "height")?;
        let params: Vec<f64> = t.map(|p| field(&lines, n, Some(p), "camera parameter")).collect::<Result<_>>()?;
        if params.len() != model.param_count() {
            return Err(lines.err(
                n,
                format!("{} expects {} parameters, got {}", model.name(), model.param_count(), params.len()),
            ));
        }
        if model == CameraModel::SimpleRadial && params[3] != 0.0 {
            return Err(Error::UnsupportedCamera(format!("SIMPLE_RADIAL with distortion {}", params[3])));
        }
        out.push(ColmapCamera {
            id,
            model,
            width,
            height,
            params,
        });
    }
    Ok(out)
}

fn normalized(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return None;
    }
    // Already-unit quaternions are kept bit-exact so that write/read round-trips.
    Some(if (n - 1.0).abs() <= 1e-14 { q } else { q.map(|v| v / n) })
}

pub fn parse_images(text: &str) -> Result<Vec<ColmapImage>> {
    let mut lines = Lines::new("images.txt", text);
    let mut out = Vec::new();
    while let Some((n, l)) = lines.next_data() {
        let mut t = l.split_whitespace();
        let id = field(&lines, n, t.next(), "image id")?;
        let mut q = [0.0; 4];
        for (k, v) in q.iter_mut().enumerate() {
            *v = field(&lines, n, t.next(), ["qw", "qx", "qy", "qz"][k])?;
        }
        let mut tv = [0.0; 3];
        for (k, v) in tv.iter_mut().enumerate() {
            *v = field(&lines, n, t.next(), ["tx", "ty", "tz"][k])?;
        }
        let camera_id = field(&lines, n, t.next(), "camera id")?;
        let name: String = field(&lines, n, t.next(), "image name")?;
        if t.next().is_some() {
            return Err(lines.err(n, "trailing fields after image name"));
        }
        let qvec = normalized(q).ok_or_else(|| lines.err(n, "quaternion is not normalizable"))?;
        let (pn, pl) = lines.next_raw().ok_or_else(|| lines.err(n + 1, "missing 2D points line"))?;
        let toks: Vec<&str> = pl.split_whitespace().collect();
        if toks.len() % 3 != 0 {
            return Err(lines.err(pn, "2D points line must hold (x, y, point3d_id) triples"));
        }
        let points2d = toks
            .chunks(3)
            .map(|c| {
                Ok((
                    field(&lines, pn, Some(c[0]), "x")?,
                    field(&lines, pn, Some(c[1]), "y")?,
                    field(&lines, pn, Some(c[2]), "point3d id")?,
                ))
            })
            .collect::<Result<_>>()?;
        out.push(ColmapImage {
            id,
            qvec,
            tvec: tv,
            camera_id,
            name,
            points2d,
        });
    }
    Ok(out)
}

pub fn parse_points(text: &str) -> Result<Vec<ColmapPoint>> {
    let mut lines = Lines::new("points3D.txt", text);
    let mut out = Vec::new();
    while let Some((n, l)) = lines.next_data() {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 8 {
            return Err(lines.err(n, format!("expected at least 8 fields, got {}", toks.len())));
        }
        let id = field(&lines, n, Some(toks[0]), "point id")?;
        let xyz = [
            field(&lines, n, Some(toks[1]), "x")?,
            field(&lines, n, Some(toks[2]), "y")?,
            field(&lines, n, Some(toks[3]), "z")?,
        ];
        let rgb = [
            field(&lines, n, Some(toks[4]), "red")?,
            field(&lines, n, Some(toks[5]), "green")?,
            field(&lines, n, Some(toks[6]), "blue")?,
        ];
        let error = field(&lines, n, Some(toks[7]), "reprojection error")?;
        let rest = &toks[8..];
        if rest.is_empty() {
            return Err(lines.err(n, "missing track"));
        }
        if rest.len() % 2 != 0 {
            return Err(lines.err(n, "track must hold (image_id, point2d_idx) pairs"));
        }
        let track = rest
            .chunks(2)
            .map(|c| Ok((field(&lines, n, Some(c[0]), "track image id")?, field(&lines, n, Some(c[1]), "track point index")?)))
            .collect::<Result<_>>()?;
        out.push(ColmapPoint { id, xyz, rgb, error, track });
    }
    Ok(out)
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path),
        _ => e.into(),
    })
}

/// Loads a text model, checking that every image references a known camera.
pub fn load_colmap_text(dir: &Path) -> Result<ColmapModel> {
    let model = ColmapModel {
        cameras: parse_cameras(&read(dir, "cameras.txt")?)?,
        images: parse_images(&read(dir, "images.txt")?)?,
        points: parse_points(&read(dir, "points3D.txt")?)?,
    };
    for img in &model.images {
        if model.camera(img.camera_id).is_none() {
            return Err(Error::invalid(format!("image {} references missing camera {}", img.id, img.camera_id)));
        }
    }
    Ok(model)
}

pub fn write_colmap_text(dir: &Path, model: &ColmapModel) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut s = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in &model.cameras {
        write!(s, "{} {} {} {}", c.id, c.model.name(), c.width, c.height).unwrap();
        for p in &c.params {
            write!(s, " {p:?}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(dir.join("cameras.txt"), s)?;

    let mut s = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for im in &model.images {
        let [qw, qx, qy, qz] = im.qvec;
        let [tx, ty, tz] = im.tvec;
        writeln!(s, "{} {qw:?} {qx:?} {qy:?} {qz:?} {tx:?} {ty:?} {tz:?} {} {}", im.id, im.camera_id, im.name).unwrap();
        let pts: Vec<String> = im.points2d.iter().map(|(x, y, id)| format!("{x:?} {y:?} {id}")).collect();
        s.push_str(&pts.join(" "));
        s.push('\n');
    }
    std::fs::write(dir.join("images.txt"), s)?;

    let mut s = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for p in &model.points {
        let [x, y, z] = p.xyz;
        let [r, g, b] = p.rgb;
        write!(s, "{} {x:?} {y:?} {z:?} {r} {g} {b} {:?}", p.id, p.error).unwrap();
        for (i, j) in &p.track {
            write!(s, " {i} {j}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(dir.join("points3D.txt"), s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAMERAS: &str = "# comment\n1 PINHOLE 64 48 50.0 51.0 31.5 23.5\n";
    const IMAGES: &str = "# IMAGE_ID ...\n\n1 1 0 0 0 0.5 -0.25 3 1 view_000.png\n10.0 12.0 1 20.5 3.0 -1\n";
    const POINTS: &str = "1 0 0 0 255 0 0 0.5 1 0\n2 1 0 0 0 255 0 0.5 1 1\n3 0 1 0 0 0 255 0.5 1 2\n4 0 0 1 9 9 9 0.5 1 3\n";

    #[test]
    fn minimal_model_parses() {
        let cams = parse_cameras(CAMERAS).unwrap();
        assert_eq!(cams[0].intrinsics(), (50.0, 51.0, 31.5, 23.5));
        let imgs = parse_images(IMAGES).unwrap();
        assert_eq!(imgs[0].name, "view_000.png");
        assert_eq!(imgs[0].points2d, vec![(10.0, 12.0, 1), (20.5, 3.0, -1)]);
        let pts = parse_points(POINTS).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[1].rgb, [0, 255, 0]);
    }

    #[test]
    fn empty_points_line_is_allowed() {
        let imgs = parse_images("1 1 0 0 0 0 0 0 1 a.png\n\n2 1 0 0 0 0 0 0 1 b.png\n\n").unwrap();
        assert_eq!(imgs.len(), 2);
        assert!(imgs[1].points2d.is_empty());
    }

    #[test]
    fn missing_track_reports_line() {
        let err = parse_points("# header\n1 0 0 0 1 2 3 0.1 4 0\n2 0 0 0 1 2 3 0.1\n").unwrap_err();
        match err {
            Error::Parse { file, line, .. } => {
                assert_eq!(file, "points3D.txt");
                assert_eq!(line, 3);
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn unsupported_models_are_rejected() {
        assert!(matches!(parse_cameras("1 OPENCV 4 4 1 1 1 1 0 0 0 0\n"), Err(Error::UnsupportedCamera(_))));
        assert!(matches!(parse_cameras("1 SIMPLE_RADIAL 4 4 1 2 2 0.1\n"), Err(Error::UnsupportedCamera(_))));
        let c = parse_cameras("1 SIMPLE_RADIAL 4 4 1 2 2 0\n").unwrap();
        assert_eq!(c[0].intrinsics(), (1.0, 1.0, 2.0, 2.0));
        assert!(matches!(parse_cameras("1 PINHOLE 4 4 1 2\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn quaternions_are_normalized() {
        let imgs = parse_images("1 2 0 0 0 0 0 0 1 a.png\n\n").unwrap();
        assert_eq!(imgs[0].qvec, [1.0, 0.0, 0.0, 0.0]);
        assert!(parse_images("1 0 0 0 0 0 0 0 1 a.png\n\n").is_err());
    }
}
