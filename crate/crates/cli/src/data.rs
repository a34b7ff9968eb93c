//! On-disk datasets: a manifest CSV (`path,subject_id,stage`) next to MPGV
//! volumes, with optional ground-truth maps under `truth/`.

use std::fs;
use std::path::{Path, PathBuf};

use mpgan::phantom::{split_by_subject, PhantomSample, Split};
use mpgan::train::Dataset;
use mpgan::volume::{load_grid, load_volume, save_grid, save_volume};
use mpgan::{ClassLabel, Error, Grid3, Result, Volume};

pub const MANIFEST_HEADER: &str = "path,subject_id,stage";
pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub subject_id: usize,
    pub stage: usize,
}

/// Ground-truth map of `subject` from `stage` toward `target`, relative to
/// the dataset root.
pub fn truth_path(subject: usize, stage: usize, target: usize) -> PathBuf {
    PathBuf::from(format!("truth/subject{subject:04}_stage{stage}_to{target}.mpgv"))
}

fn volume_path(subject: usize, stage: usize, scan: usize) -> PathBuf {
    PathBuf::from(format!("volumes/subject{subject:04}_stage{stage}_scan{scan}.mpgv"))
}

fn atlas_path(subject: usize) -> PathBuf {
    PathBuf::from(format!("atlas/subject{subject:04}.mpgv"))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes volumes, truth maps toward every other stage, per-subject lesion
/// atlases and the manifest. Returns the manifest rows.
pub fn write_phantom(samples: &[PhantomSample], root: &Path) -> Result<Vec<ManifestRow>> {
    for dir in ["volumes", "truth", "atlas"] {
        mkdir(&root.join(dir))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let stage = s.label.index();
        let path = volume_path(s.subject_id, stage, s.scan);
        save_volume(&s.volume, root.join(&path))?;
        if s.scan == 0 {
            for t in (0..s.label.k()).filter(|&t| t != stage) {
                save_grid(&s.gt_map_normalized(t), root.join(truth_path(s.subject_id, stage, t)))?;
            }
            if stage == 0 {
                let atlas = s.atlas().iter().map(|&v| v as f64).collect();
                save_grid(&Grid3::new(s.volume.shape(), atlas)?, root.join(atlas_path(s.subject_id)))?;
            }
        }
        rows.push(ManifestRow {
            path,
            subject_id: s.subject_id,
            stage,
        });
    }
    write_manifest(&rows, &root.join(MANIFEST_NAME))?;
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let mut text = format!("{MANIFEST_HEADER}\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.path.display(), r.subject_id, r.stage));
    }
    write_text(path, &text)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::CorruptHeader(format!("{}: expected header {MANIFEST_HEADER:?}", path.display())));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::InvalidArgument(format!("{} line {}: expected path,subject_id,stage", path.display(), i + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [p, subject, stage] = fields[..] else {
            return Err(bad());
        };
        rows.push(ManifestRow {
            path: PathBuf::from(p),
            subject_id: subject.parse().map_err(|_| bad())?,
            stage: stage.parse().map_err(|_| bad())?,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no volumes", path.display())));
    }
    Ok(rows)
}

/// A manifest with its volumes loaded.
pub struct OnDisk {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub volumes: Vec<Volume>,
    pub k: usize,
}

impl OnDisk {
    pub fn load(manifest: &Path) -> Result<Self> {
        let rows = read_manifest(manifest)?;
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let volumes = rows.iter().map(|r| load_volume(root.join(&r.path))).collect::<Result<Vec<_>>>()?;
        let k = rows.iter().map(|r| r.stage).max().unwrap_or(0) + 1;
        Ok(OnDisk { root, rows, volumes, k })
    }

    pub fn label(&self, i: usize) -> Result<ClassLabel> {
        ClassLabel::new(self.rows[i].stage, self.k)
    }

    pub fn labels(&self, idx: &[usize]) -> Result<Vec<ClassLabel>> {
        idx.iter().map(|&i| self.label(i)).collect()
    }

    pub fn split(&self, fractions: [f64; 3], seed: u64) -> Result<Split> {
        let ids: Vec<usize> = self.rows.iter().map(|r| r.subject_id).collect();
        split_by_subject(&ids, fractions, seed)
    }

    pub fn dataset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            idx.iter().map(|&i| self.volumes[i].clone()).collect(),
            self.labels(idx)?,
            idx.iter().map(|&i| Some(self.rows[i].subject_id)).collect(),
        )
    }

    pub fn truth(&self, i: usize, target: usize) -> Result<Grid3> {
        let r = &self.rows[i];
        load_grid(self.root.join(truth_path(r.subject_id, r.stage, target)))
    }

    /// File stem used to name per-volume outputs.
    pub fn stem(&self, i: usize) -> String {
        self.rows[i].path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("volume{i}"))
    }
}

pub const SPLIT_CSV_HEADER: &str = "path,subject_id,stage,split";

pub fn split_csv(data: &OnDisk, split: &Split) -> String {
    let mut out = format!("{SPLIT_CSV_HEADER}\n");
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for &i in idx {
            let r = &data.rows[i];
            out.push_str(&format!("{},{},{},{name}\n", r.path.display(), r.subject_id, r.stage));
        }
    }
    out
}
