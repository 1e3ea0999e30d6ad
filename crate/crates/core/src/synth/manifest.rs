//! Dataset manifest: a versioned, line-delimited text file. One `record`
//! line per pair, one `clean` line per unpaired pool image, tab-separated,
//! floats in shortest round-trip form. Field order for records:
//!
//! ```text
//! record  id  split  degraded  groundtruth  source  crop_y  crop_x  seed
//!         h00 h01 h02 h10 h11 h12 h20 h21 h22  k1 k2 cx cy
//!         aa_sigma aa_plateau noise_sigma jpeg_quality output_scale
//! ```

use super::SynthesisParams;
use crate::error::{Error, ManifestError, Result};
use crate::image::{io, Homography, RadialDistortion};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

const HEADER: &str = "demoire-manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ManifestRecord {
    pub id: u64,
    pub split: Split,
    /// Paths are stored relative to the manifest's directory.
    pub degraded: String,
    pub groundtruth: String,
    /// Provenance: source image and crop offset, enough to replay the
    /// record from scratch.
    pub source: String,
    pub crop_y: usize,
    pub crop_x: usize,
    pub params: SynthesisParams,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub clean_pool: Vec<String>,
}

impl DatasetManifest {
    pub fn degraded_path(&self, r: &ManifestRecord) -> PathBuf {
        self.dir.join(&r.degraded)
    }

    pub fn groundtruth_path(&self, r: &ManifestRecord) -> PathBuf {
        self.dir.join(&r.groundtruth)
    }

    pub fn clean_path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        for c in &self.clean_pool {
            out.push_str(&format!("clean\t{c}\n"));
        }
        for r in &self.records {
            let h = r.params.homography.matrix();
            let d = &r.params.distortion;
            out.push_str(&format!(
                "record\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                r.split.as_str(),
                r.degraded,
                r.groundtruth,
                r.source,
                r.crop_y,
                r.crop_x,
                r.params.seed,
                h[0][0], h[0][1], h[0][2], h[1][0], h[1][1], h[1][2], h[2][0], h[2][1], h[2][2],
                d.k1, d.k2, d.center.0, d.center.1,
                r.params.aa_sigma,
                r.params.aa_plateau,
                r.params.noise_sigma,
                r.params.jpeg_quality,
                r.params.output_scale,
            ));
        }
        let tmp = path.with_extension("txt.tmp");
        std::fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Parse and fully validate: header, field syntax, unique ids, every
    /// referenced file present and decodable, clean pool disjoint from the
    /// groundtruth set.
    pub fn load(path: impl AsRef<Path>) -> Result<DatasetManifest> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(ManifestError::MissingFile {
                path: path.to_path_buf(),
            }
            .into());
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));

        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            Some((_, h)) => {
                return Err(ManifestError::Header(format!("expected '{HEADER}', got '{h}'")).into());
            }
            None => return Err(ManifestError::Header("empty file".into()).into()),
        }

        let mut records = Vec::new();
        let mut clean_pool = Vec::new();
        for (ix, line) in lines {
            let line_no = ix + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "clean" if fields.len() == 2 => clean_pool.push(fields[1].to_string()),
                "record" if fields.len() == 27 => {
                    records.push(parse_record(&fields, line_no)?);
                }
                tag => {
                    return Err(ManifestError::Record {
                        line: line_no,
                        message: format!("unrecognized or malformed line starting '{tag}'"),
                    }
                    .into());
                }
            }
        }

        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id) {
                return Err(ManifestError::DuplicateId { id: r.id }.into());
            }
        }

        let manifest = DatasetManifest {
            dir,
            records,
            clean_pool,
        };
        for r in &manifest.records {
            for p in [manifest.degraded_path(r), manifest.groundtruth_path(r)] {
                if !io::png_header_ok(&p) {
                    return Err(ManifestError::DanglingPath { id: r.id, path: p }.into());
                }
            }
        }
        let gt_names: HashSet<&str> = manifest
            .records
            .iter()
            .map(|r| r.groundtruth.as_str())
            .collect();
        for c in &manifest.clean_pool {
            if gt_names.contains(c.as_str()) {
                return Err(ManifestError::CleanPoolOverlap {
                    path: manifest.clean_path(c),
                }
                .into());
            }
            let p = manifest.clean_path(c);
            if !io::png_header_ok(&p) {
                return Err(ManifestError::DanglingCleanPath { path: p }.into());
            }
        }
        Ok(manifest)
    }
}

fn parse_record(fields: &[&str], line: usize) -> Result<ManifestRecord> {
    let err = |message: String| -> Error { ManifestError::Record { line, message }.into() };
    let fu64 = |s: &str, what: &str| -> Result<u64> {
        s.parse::<u64>()
            .map_err(|_| err(format!("bad {what}: '{s}'")))
    };
    let ff64 = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| err(format!("bad {what}: '{s}'")))
    };

    let id = fu64(fields[1], "id")?;
    let split = Split::parse(fields[2]).ok_or_else(|| err(format!("bad split '{}'", fields[2])))?;
    let mut h = [[0.0f64; 3]; 3];
    for i in 0..9 {
        h[i / 3][i % 3] = ff64(fields[9 + i], "homography entry")?;
    }
    let homography =
        Homography::new(h).map_err(|e| err(format!("invalid homography: {e}")))?;
    let distortion = RadialDistortion::new(
        ff64(fields[18], "k1")?,
        ff64(fields[19], "k2")?,
        (ff64(fields[20], "cx")?, ff64(fields[21], "cy")?),
    )
    .map_err(|e| err(format!("invalid distortion: {e}")))?;

    Ok(ManifestRecord {
        id,
        split,
        degraded: fields[3].to_string(),
        groundtruth: fields[4].to_string(),
        source: fields[5].to_string(),
        crop_y: fu64(fields[6], "crop_y")? as usize,
        crop_x: fu64(fields[7], "crop_x")? as usize,
        params: SynthesisParams {
            seed: fu64(fields[8], "seed")?,
            homography,
            distortion,
            aa_sigma: ff64(fields[22], "aa_sigma")?,
            aa_plateau: fu64(fields[23], "aa_plateau")? as usize,
            noise_sigma: ff64(fields[24], "noise_sigma")?,
            jpeg_quality: fu64(fields[25], "jpeg_quality")? as u8,
            output_scale: fu64(fields[26], "output_scale")? as usize,
        },
    })
}
