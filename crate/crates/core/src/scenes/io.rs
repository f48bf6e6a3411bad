//! On-disk dataset: `manifest.json` plus per-view PPM / PGM / raw `.f32` files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Aabb, CameraParams, MultiViewSample, SceneSpec, SdfPrimitive, View, ViewRender};
use crate::error::{Result, SpaError};

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<MultiViewSample>,
    pub class_count: usize,
    pub teacher_seed: u64,
    pub teacher_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    class_count: usize,
    teacher_seed: u64,
    teacher_dim: usize,
    scenes: Vec<SceneEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneEntry {
    id: String,
    bounds_min: [f64; 3],
    bounds_max: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    primitives: Option<Vec<SdfPrimitive>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    background: Option<[f64; 3]>,
    views: Vec<ViewEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewEntry {
    rgb: String,
    depth: String,
    semantic: String,
    width: usize,
    height: usize,
    /// fx, fy, cx, cy
    intrinsics: [f64; 4],
    /// Row-major world-to-camera 4x4.
    extrinsics: Vec<f64>,
}

fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(SpaError::io(path))
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<()> {
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend(rgb.iter().map(|&x| quantize(x)));
    write_file(path, &bytes)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(values);
    write_file(path, &bytes)
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, &bytes)
}

/// Parses a binary PNM (P5 or P6, maxval 255) into (width, height, bytes).
fn read_pnm(path: &Path, magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(SpaError::io(path))?;
    let bad = |r: &str| SpaError::format(path, r.to_string());
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1; // single whitespace byte after maxval
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let channels = if magic == "P6" { 3 } else { 1 };
    let data = bytes.get(i..).unwrap_or_default();
    if data.len() != w * h * channels {
        return Err(bad("pixel data length does not match the header"));
    }
    Ok((w, h, data.to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (w, h, d) = read_pnm(path, "P6")?;
    Ok((w, h, d.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(path, "P5")
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(SpaError::io(path))?;
    if bytes.len() != expected * 4 {
        return Err(SpaError::format(
            path,
            format!("{} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(SpaError::io(dir))?;
    let mut scenes = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let mut views = Vec::with_capacity(s.views.len());
        for (i, v) in s.views.iter().enumerate() {
            let c = &v.camera;
            let stem = format!("{}_v{i}", s.scene_id);
            let entry = ViewEntry {
                rgb: format!("{stem}.ppm"),
                depth: format!("{stem}_depth.f32"),
                semantic: format!("{stem}_sem.pgm"),
                width: c.width,
                height: c.height,
                intrinsics: [c.fx, c.fy, c.cx, c.cy],
                extrinsics: c.extrinsics().to_vec(),
            };
            write_ppm(&dir.join(&entry.rgb), c.width, c.height, &v.render.rgb)?;
            write_f32(&dir.join(&entry.depth), &v.render.depth)?;
            write_pgm(&dir.join(&entry.semantic), c.width, c.height, &v.render.semantic)?;
            views.push(entry);
        }
        let (bounds_min, bounds_max) = s.bounds.to_arrays();
        scenes.push(SceneEntry {
            id: s.scene_id.clone(),
            bounds_min,
            bounds_max,
            primitives: s.scene.as_ref().map(|sc| sc.primitives.clone()),
            background: s.scene.as_ref().map(|sc| sc.background),
            views,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        class_count: ds.class_count,
        teacher_seed: ds.teacher_seed,
        teacher_dim: ds.teacher_dim,
        scenes,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_file(&path, text.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(SpaError::io(&path))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| SpaError::format(&path, e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(SpaError::format(&path, format!("unsupported version {}", m.version)));
    }
    let mut samples = Vec::with_capacity(m.scenes.len());
    for s in m.scenes {
        let bounds = Aabb::new(s.bounds_min, s.bounds_max)
            .map_err(|e| SpaError::format(&path, format!("scene {}: {e}", s.id)))?;
        let mut views = Vec::with_capacity(s.views.len());
        for v in &s.views {
            views.push(read_view(dir, &path, v)?);
        }
        let scene = match s.primitives {
            Some(primitives) => Some(SceneSpec {
                primitives,
                bounds,
                background: s.background.unwrap_or([0.0; 3]),
            }),
            None => None,
        };
        if let Some(sc) = &scene {
            sc.validate(m.class_count)
                .map_err(|e| SpaError::format(&path, format!("scene {}: {e}", s.id)))?;
        }
        samples.push(MultiViewSample {
            scene_id: s.id,
            bounds,
            views,
            scene,
        });
    }
    Ok(Dataset {
        samples,
        class_count: m.class_count,
        teacher_seed: m.teacher_seed,
        teacher_dim: m.teacher_dim,
    })
}

fn read_view(dir: &Path, manifest: &PathBuf, v: &ViewEntry) -> Result<View> {
    let ext: [f64; 16] = v
        .extrinsics
        .as_slice()
        .try_into()
        .map_err(|_| SpaError::format(manifest, "extrinsics must have 16 entries"))?;
    let camera = CameraParams::from_extrinsics(&ext, v.intrinsics, v.width, v.height)
        .map_err(|e| SpaError::format(manifest, e.to_string()))?;
    let n = v.width * v.height;
    let (rgb_path, sem_path) = (dir.join(&v.rgb), dir.join(&v.semantic));
    let (w, h, rgb) = read_ppm(&rgb_path)?;
    if (w, h) != (v.width, v.height) {
        return Err(SpaError::format(rgb_path, "image size differs from the manifest"));
    }
    let (w, h, semantic) = read_pgm(&sem_path)?;
    if (w, h) != (v.width, v.height) {
        return Err(SpaError::format(sem_path, "image size differs from the manifest"));
    }
    let depth = read_f32(&dir.join(&v.depth), n)?;
    Ok(View {
        render: ViewRender {
            rgb,
            depth,
            semantic,
        },
        camera,
    })
}
