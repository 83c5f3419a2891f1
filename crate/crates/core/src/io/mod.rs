//! Reading and writing scenes, images and configuration.

pub mod colmap;
pub mod config;
pub mod synthetic;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::ply::{save_ply, Precision};
use crate::scene::PointSet;
use crate::trainer::View;

use colmap::{load_colmap_text, write_colmap_text, CameraModel, ColmapCamera, ColmapImage, ColmapModel, ColmapPoint};
use synthetic::{MaskSpec, SyntheticScene, SyntheticSpec};

fn not_found(path: &Path, e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => e.into(),
    }
}

pub fn read_png(path: &Path) -> Result<Image> {
    let reader = image::ImageReader::open(path).map_err(|e| not_found(path, e))?;
    Ok(Image::from_rgb8(&reader.with_guessed_format()?.decode()?.to_rgb8()))
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    img.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Metadata stored next to a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneInfo {
    pub seed: u64,
    pub spec: SyntheticSpec,
}

/// Views and initialization points of a scene directory.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    /// Sorted by image name.
    pub views: Vec<View>,
    pub points: PointSet,
    pub mask: Option<MaskSpec>,
    pub background: Option<[f64; 3]>,
}

/// Writes `sparse/` (COLMAP text), `images/*.png`, `ground_truth.ply` and
/// `scene.toml` under `dir`.
pub fn write_scene_dir(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut model = ColmapModel::default();
    for (k, v) in scene.views.iter().enumerate() {
        let c = &v.camera;
        let id = k as u32 + 1;
        model.cameras.push(ColmapCamera {
            id,
            model: CameraModel::Pinhole,
            width: c.width,
            height: c.height,
            params: vec![c.fx, c.fy, c.cx, c.cy],
        });
        model.images.push(ColmapImage {
            id,
            qvec: c.qvec(),
            tvec: [c.translation.x, c.translation.y, c.translation.z],
            camera_id: id,
            name: v.name.clone(),
            points2d: Vec::new(),
        });
        write_png(&images.join(&v.name), &v.image)?;
    }
    for (i, (p, c)) in scene.points.positions.iter().zip(&scene.points.colors).enumerate() {
        model.points.push(ColmapPoint {
            id: i as u64 + 1,
            xyz: [p.x, p.y, p.z],
            rgb: [0, 1, 2].map(|ch| (c[ch].clamp(0.0, 1.0) * 255.0).round() as u8),
            error: 0.0,
            track: vec![(1, 0)],
        });
    }
    write_colmap_text(&dir.join("sparse"), &model)?;
    save_ply(&dir.join("ground_truth.ply"), &scene.ground_truth, Precision::F64)?;
    let info = SceneInfo {
        seed: scene.seed,
        spec: scene.spec.clone(),
    };
    std::fs::write(dir.join("scene.toml"), toml::to_string(&info).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(())
}

/// Finds the sparse model directory: `sparse/0`, `sparse`, or `dir` itself.
fn sparse_dir(dir: &Path) -> PathBuf {
    for cand in [dir.join("sparse").join("0"), dir.join("sparse")] {
        if cand.join("cameras.txt").exists() {
            return cand;
        }
    }
    dir.to_path_buf()
}

/// Loads a scene directory with a COLMAP text model and an `images/` folder,
/// downscaling images and intrinsics by `downscale`.
pub fn load_scene_dir(dir: &Path, downscale: u32) -> Result<LoadedScene> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let model = load_colmap_text(&sparse_dir(dir))?;
    let mut images = model.images.clone();
    images.sort_by(|a, b| a.name.cmp(&b.name));
    let mut views = Vec::with_capacity(images.len());
    for im in &images {
        let mut camera = model.image_camera(im)?;
        let mut image = read_png(&dir.join("images").join(&im.name))?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::invalid(format!(
                "{}: image is {}x{} but its camera is {}x{}",
                im.name, image.width, image.height, camera.width, camera.height
            )));
        }
        if downscale > 1 {
            camera = camera.downscaled(downscale);
            let resized = image::imageops::resize(
                &image.to_rgb8(),
                camera.width as u32,
                camera.height as u32,
                image::imageops::FilterType::Triangle,
            );
            image = Image::from_rgb8(&resized);
        }
        views.push(View {
            name: im.name.clone(),
            camera,
            image,
        });
    }
    let info_path = dir.join("scene.toml");
    let info: Option<SceneInfo> = if info_path.exists() {
        let text = std::fs::read_to_string(&info_path)?;
        Some(toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", info_path.display())))?)
    } else {
        None
    };
    Ok(LoadedScene {
        views,
        points: model.point_set(),
        mask: info.as_ref().and_then(|i| i.spec.mask.clone()),
        background: info.map(|i| i.spec.background),
    })
}
