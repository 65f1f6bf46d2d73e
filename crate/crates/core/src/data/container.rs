//! Header + raw binary volume container.
//!
//! `<name>.mvol.json` holds `dims [D,H,W]`, `spacing_mm [sz,sy,sx]`, `dtype`
//! (`"f32le"` or `"u8"`), `role` (`"modality:FLAIR"` … or `"labels"`) and
//! `data_file`, a path relative to the header. The raw file stores voxel
//! `(z,y,x)` at element offset `z·H·W + y·W + x`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid, LabelVolume, Modality, MultimodalVolume, DEFAULT_CLASSES};
use crate::error::{Error, Result};

pub const HEADER_SUFFIX: &str = ".mvol.json";
pub const LABELS_FILE: &str = "labels";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: String,
    pub role: String,
    pub data_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Scan {
        modality: Modality,
        grid: Grid<f32>,
        spacing_mm: [f64; 3],
    },
    Labels(LabelVolume),
}

fn header_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}{HEADER_SUFFIX}"))
}

fn write_container(header: &Path, mut meta: ContainerHeader, raw: &[u8]) -> Result<()> {
    let name = header
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(HEADER_SUFFIX))
        .ok_or_else(|| Error::Usage(format!("{} must end in {HEADER_SUFFIX}", header.display())))?;
    meta.data_file = format!("{name}.raw");
    let raw_path = header.with_file_name(&meta.data_file);
    let json = serde_json::to_string_pretty(&meta).expect("header serialises");
    fs::write(header, json + "\n").map_err(|e| Error::io(header, e))?;
    fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn save_scan(header: &Path, modality: Modality, grid: &Grid<f32>, spacing_mm: [f64; 3]) -> Result<()> {
    let raw: Vec<u8> = grid.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = ContainerHeader {
        dims: grid.dims(),
        spacing_mm,
        dtype: "f32le".into(),
        role: format!("modality:{modality}"),
        data_file: String::new(),
    };
    write_container(header, meta, &raw)
}

/// Writes a label map as a `u8` container with role `labels`.
pub fn save_labels(header: &Path, labels: &LabelVolume) -> Result<()> {
    let meta = ContainerHeader {
        dims: labels.dims(),
        spacing_mm: labels.spacing_mm,
        dtype: "u8".into(),
        role: "labels".into(),
        data_file: String::new(),
    };
    write_container(header, meta, labels.labels.data())
}

/// Writes the four modality containers into `dir` (created if missing).
pub fn save_volume(dir: &Path, vol: &MultimodalVolume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for m in Modality::ALL {
        save_scan(&header_path(dir, m.as_str()), m, vol.scan(m), vol.spacing_mm)?;
    }
    Ok(())
}

/// A subject directory: four modality containers plus `labels`.
pub fn save_subject(dir: &Path, vol: &MultimodalVolume, labels: &LabelVolume) -> Result<()> {
    save_volume(dir, vol)?;
    save_labels(&header_path(dir, LABELS_FILE), labels)
}

pub fn read_container(header: &Path) -> Result<Container> {
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let meta: ContainerHeader = serde_json::from_str(&text)
        .map_err(|e| Error::format(header.display().to_string(), e.to_string()))?;
    if meta.dims.contains(&0) {
        return Err(Error::format("dims", format!("{:?} has a zero extent", meta.dims)));
    }
    let n: usize = meta.dims.iter().product();
    let raw_path = header.with_file_name(&meta.data_file);
    let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let role_field = || format!("{}: role", header.display());
    match (meta.dtype.as_str(), meta.role.as_str()) {
        ("f32le", role) => {
            let modality = role
                .strip_prefix("modality:")
                .ok_or_else(|| Error::format(role_field(), format!("`{role}` is not a modality role")))?
                .parse::<Modality>()?;
            if raw.len() != n * 4 {
                return Err(Error::format(
                    raw_path.display().to_string(),
                    format!("expected {} bytes for {:?} f32, found {}", n * 4, meta.dims, raw.len()),
                ));
            }
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Container::Scan {
                modality,
                grid: Grid::new(meta.dims, data)?,
                spacing_mm: meta.spacing_mm,
            })
        }
        ("u8", "labels") => {
            if raw.len() != n {
                return Err(Error::format(
                    raw_path.display().to_string(),
                    format!("expected {n} bytes for {:?} u8, found {}", meta.dims, raw.len()),
                ));
            }
            Ok(Container::Labels(LabelVolume::new(
                Grid::new(meta.dims, raw)?,
                DEFAULT_CLASSES,
                meta.spacing_mm,
            )?))
        }
        (dtype, role) => Err(Error::format(
            format!("{}: dtype", header.display()),
            format!("unsupported dtype/role pair `{dtype}`/`{role}`"),
        )),
    }
}

pub fn load_labels(header: &Path) -> Result<LabelVolume> {
    match read_container(header)? {
        Container::Labels(l) => Ok(l),
        Container::Scan { .. } => Err(Error::format(
            format!("{}: role", header.display()),
            "expected a labels container",
        )),
    }
}

/// Loads the four modality containers of a subject directory. Any other
/// `*.mvol.json` with a modality role must name a known modality.
pub fn load_volume(dir: &Path) -> Result<MultimodalVolume> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut headers: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(HEADER_SUFFIX))
        })
        .collect();
    headers.sort();
    let mut scans: [Option<(Grid<f32>, [f64; 3])>; 4] = Default::default();
    for h in &headers {
        if let Container::Scan {
            modality,
            grid,
            spacing_mm,
        } = read_container(h)?
        {
            scans[modality.index()] = Some((grid, spacing_mm));
        }
    }
    let mut grids = Vec::with_capacity(4);
    let mut spacing = None;
    for (m, slot) in Modality::ALL.into_iter().zip(scans) {
        let (grid, sp) = slot.ok_or_else(|| {
            Error::format(
                format!("{}: modality:{m}", dir.display()),
                "missing modality container",
            )
        })?;
        match spacing {
            None => spacing = Some(sp),
            Some(s) if s != sp => {
                return Err(Error::format(
                    "spacing_mm",
                    format!("{m} spacing {sp:?} differs from {s:?}"),
                ))
            }
            _ => {}
        }
        grids.push(grid);
    }
    let scans: [Grid<f32>; 4] = grids.try_into().expect("four modalities");
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    MultimodalVolume::new(scans, spacing.expect("four modalities"), id)
}

/// Header path of the labels container inside a subject directory.
pub fn labels_header(dir: &Path) -> PathBuf {
    header_path(dir, LABELS_FILE)
}
