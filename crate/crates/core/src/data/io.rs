use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{mutual_nn_pairs, ScenePair};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// ASCII PLY with `double` x/y/z vertex properties. Values are written in
/// shortest round-trip form, so reading back is bit-exact.
pub fn write_ply(cloud: &PointCloud) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    for p in &cloud.points {
        s.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    s
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parse ASCII PLY vertices. Extra vertex properties and later elements are
/// ignored; x, y and z are required.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(1, "missing 'ply' magic")),
    }
    let mut n_vertex: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut rows_before_vertex = 0usize;
    let mut header_done = false;
    for (ln, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(ln, format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let c: usize = count.parse().map_err(|_| parse_err(ln, format!("bad element count {count}")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    n_vertex = Some(c);
                } else if n_vertex.is_none() {
                    rows_before_vertex += c;
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(parse_err(ln, "list properties on vertices are not supported"));
                }
            }
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(ln, format!("unrecognized header line '{line}'"))),
        }
    }
    if !header_done {
        return Err(parse_err(text.lines().count(), "header not terminated"));
    }
    let n = n_vertex.ok_or_else(|| Error::Schema("PLY has no vertex element".into()))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::Schema(format!("PLY vertex property {name} missing")))
    };
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
    let mut body = lines.filter(|(_, l)| !l.is_empty()).skip(rows_before_vertex);
    let mut pts = Vec::with_capacity(n);
    for k in 0..n {
        let (ln, line) = body.next().ok_or_else(|| parse_err(0, format!("expected {n} vertices, found {k}")))?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() < props.len() {
            return Err(parse_err(ln, format!("expected {} values", props.len())));
        }
        let get = |i: usize| -> Result<f64> { vals[i].parse().map_err(|_| parse_err(ln, format!("bad number '{}'", vals[i]))) };
        pts.push(Vector3::new(get(ix)?, get(iy)?, get(iz)?));
    }
    Ok(PointCloud::new(pts))
}

pub fn save_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, write_ply(cloud))?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&fs::read_to_string(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub src: String,
    pub tgt: String,
    /// Row-major 3×4 `[R | t]`, rigid scenes only.
    #[serde(default)]
    pub gt_transform: Option<[[f64; 4]; 3]>,
    /// PLY of per-source-point flow vectors, deformable scenes only.
    #[serde(default)]
    pub flow: Option<String>,
    pub sigma: f64,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub pairs: Vec<ManifestEntry>,
}

fn schema_err(e: serde_json::Error) -> Error {
    Error::Schema(e.to_string())
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(schema_err)?;
        if m.schema != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported manifest schema {}", m.schema)));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }
}

/// Read one pair; ground-truth pairs are recomputed by mutual nearest
/// neighbors under the stored warp.
pub fn load_pair(dir: &Path, entry: &ManifestEntry) -> Result<ScenePair> {
    let src = load_ply(&dir.join(&entry.src))?;
    let tgt = load_ply(&dir.join(&entry.tgt))?;
    let gt_transform = entry.gt_transform.as_ref().map(RigidTransform::from_rows);
    let gt_flow = match &entry.flow {
        Some(f) => {
            let v = load_ply(&dir.join(f))?.points;
            if v.len() != src.len() {
                return Err(Error::Schema(format!("{}: {} flow vectors for {} points", entry.name, v.len(), src.len())));
            }
            Some(v)
        }
        None => None,
    };
    if gt_transform.is_none() && gt_flow.is_none() {
        return Err(Error::Schema(format!("{}: needs gt_transform or flow", entry.name)));
    }
    let mut pair = ScenePair {
        name: entry.name.clone(),
        src,
        tgt,
        gt_transform,
        gt_flow,
        gt_pairs: Vec::new(),
        overlap: entry.overlap,
        sigma: entry.sigma,
    };
    pair.gt_pairs = mutual_nn_pairs(&pair.warped_src(), &pair.tgt, pair.sigma);
    Ok(pair)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ScenePair>> {
    let m = Manifest::load(dir)?;
    m.pairs.iter().map(|e| load_pair(dir, e)).collect()
}

/// Write PLY files and the manifest into `dir`, which is created if needed.
pub fn save_dataset(dir: &Path, pairs: &[ScenePair]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (k, p) in pairs.iter().enumerate() {
        let name = if p.name.is_empty() { format!("pair_{k:04}") } else { p.name.clone() };
        let src = format!("{name}_src.ply");
        let tgt = format!("{name}_tgt.ply");
        save_ply(&dir.join(&src), &p.src)?;
        save_ply(&dir.join(&tgt), &p.tgt)?;
        let flow = match &p.gt_flow {
            Some(f) => {
                let file = format!("{name}_flow.ply");
                save_ply(&dir.join(&file), &PointCloud::new(f.clone()))?;
                Some(file)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            name,
            src,
            tgt,
            gt_transform: p.gt_transform.map(|t| t.to_rows()),
            flow,
            sigma: p.sigma,
            overlap: p.overlap,
        });
    }
    let m = Manifest {
        schema: SCHEMA_VERSION,
        pairs: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}
