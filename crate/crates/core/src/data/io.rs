//! On-disk datasets.
//!
//! A dataset directory holds `dataset.txt` and one `<domain>.famt` per
//! domain. The manifest reads
//!
//! ```text
//! FAMLP-DATASET 1
//! channels=1
//! image_size=32
//! num_classes=7
//! domain=clean 420
//! domain=lowpass 420
//! ```
//!
//! and each domain file is a `FAMT` tensor `[N, channels, H, W]` followed
//! by `N` little-endian `u32` labels.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::{DomainSample, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, read_tensor_from, write_tensor_to, Tensor};

pub const DATASET_HEADER: &str = "FAMLP-DATASET 1";
const MANIFEST: &str = "dataset.txt";

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::Parameter(format!("domain name `{name}` is not filename-safe")))
    }
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &MultiDomainDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "{DATASET_HEADER}\nchannels={}\nimage_size={}\nnum_classes={}\n",
        ds.channels(),
        ds.image_size(),
        ds.num_classes()
    );
    for (name, samples) in ds.domains() {
        check_name(name)?;
        manifest.push_str(&format!("domain={name} {}\n", samples.len()));

        let per = ds.channels() * ds.image_size() * ds.image_size();
        let mut data = Vec::with_capacity(samples.len() * per);
        samples.iter().for_each(|s| data.extend_from_slice(s.image.data()));
        let stacked = Tensor::new(
            vec![samples.len(), ds.channels(), ds.image_size(), ds.image_size()],
            data,
        )?;
        let path = dir.join(format!("{name}.famt"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = || -> std::io::Result<()> {
            write_tensor_to(&mut w, &stacked)?;
            for s in samples {
                w.write_all(&(s.label as u32).to_le_bytes())?;
            }
            w.flush()
        };
        write().map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

struct Manifest {
    channels: usize,
    image_size: usize,
    num_classes: usize,
    domains: Vec<(String, usize)>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let bad = |msg: String| Error::format("dataset manifest", msg);
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(DATASET_HEADER) {
        return Err(bad(format!("missing `{DATASET_HEADER}` header")));
    }
    let (mut channels, mut image_size, mut num_classes) = (None, None, None);
    let mut domains = Vec::new();
    for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("bad line `{line}`")))?;
        let count = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad count in `{line}`")));
        match key {
            "channels" => channels = Some(count(value)?),
            "image_size" => image_size = Some(count(value)?),
            "num_classes" => num_classes = Some(count(value)?),
            "domain" => {
                let (name, n) = value
                    .split_once(' ')
                    .ok_or_else(|| bad(format!("bad domain line `{line}`")))?;
                check_name(name)?;
                domains.push((name.to_string(), count(n)?));
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    let need = |v: Option<usize>, k: &str| v.ok_or_else(|| bad(format!("missing `{k}`")));
    Ok(Manifest {
        channels: need(channels, "channels")?,
        image_size: need(image_size, "image_size")?,
        num_classes: need(num_classes, "num_classes")?,
        domains,
    })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<MultiDomainDataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = parse_manifest(&text)?;
    let geometry = [manifest.channels, manifest.image_size, manifest.image_size];
    let per: usize = geometry.iter().product();

    let mut domains = IndexMap::new();
    for (name, n) in &manifest.domains {
        let path = dir.join(format!("{name}.famt"));
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = BufReader::new(file);
        let stacked = read_tensor_from(&mut r)?;
        let want = [*n, geometry[0], geometry[1], geometry[2]];
        if stacked.shape() != want {
            return Err(Error::shape("dataset file", &want, stacked.shape()));
        }
        let mut labels = vec![0u8; 4 * n];
        r.read_exact(&mut labels)
            .map_err(|e| Error::format("dataset file", format!("{}: labels: {e}", path.display())))?;
        let samples = labels
            .chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                let label = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
                let image = Tensor::new(geometry.to_vec(), stacked.data()[i * per..(i + 1) * per].to_vec())?;
                Ok(DomainSample {
                    image,
                    label,
                    domain: name.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        domains.insert(name.clone(), samples);
    }
    MultiDomainDataset::new(domains, manifest.num_classes, manifest.channels, manifest.image_size)
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Imports `root/<domain>/<class>/*.famt`, each file one `[channels, H, W]`
/// tensor. Domains and classes are ordered by name; class indices follow
/// the sorted union of class directory names over all domains.
pub fn import_folder_tree(root: impl AsRef<Path>) -> Result<MultiDomainDataset> {
    let root = root.as_ref();
    let domain_dirs = sorted_entries(root, true)?;
    let mut class_names = BTreeSet::new();
    for d in &domain_dirs {
        for c in sorted_entries(d, true)? {
            class_names.insert(file_name(&c));
        }
    }
    let class_names: Vec<String> = class_names.into_iter().collect();
    let mut geometry: Option<Vec<usize>> = None;
    let mut domains = IndexMap::new();
    for d in &domain_dirs {
        let name = file_name(d);
        check_name(&name)?;
        let mut samples = Vec::new();
        for c in sorted_entries(d, true)? {
            let label = class_names
                .iter()
                .position(|n| *n == file_name(&c))
                .expect("collected above");
            for f in sorted_entries(&c, false)? {
                if f.extension().and_then(|e| e.to_str()) != Some("famt") {
                    continue;
                }
                let image = read_tensor(&f)?;
                match &geometry {
                    None => {
                        let s = image.shape();
                        if s.len() != 3 || s[1] != s[2] {
                            return Err(Error::dim(
                                "import",
                                format!("{}: expected [channels, H, H], got {s:?}", f.display()),
                            ));
                        }
                        geometry = Some(s.to_vec());
                    }
                    Some(g) if g.as_slice() != image.shape() => {
                        return Err(Error::shape("import", g, image.shape()));
                    }
                    Some(_) => {}
                }
                samples.push(DomainSample {
                    image,
                    label,
                    domain: name.clone(),
                });
            }
        }
        domains.insert(name, samples);
    }
    let g = geometry.ok_or_else(|| Error::Parameter(format!("no .famt images under {}", root.display())))?;
    MultiDomainDataset::new(domains, class_names.len(), g[0], g[1])
}
