//! On-disk synthetic datasets: one little-endian binary file per clip plus a
//! text manifest.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::Tensor;
use crate::body::BodyConfig;
use crate::error::{Error, Result};
use crate::kv::Record;
use crate::synth::{Camera, Generator, MotionClip, SynthConfig};

pub const CLIP_MAGIC: &[u8; 8] = b"COEVCLIP";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

/// Bytes before the payload: magic, version, four dims, camera (15 f64),
/// scale, girth and seed.
const HEADER_LEN: usize = 8 + 4 * 5 + 15 * 8 + 8 + 8 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: SynthConfig,
    pub clips: Vec<String>,
}

impl DatasetManifest {
    pub fn render(&self) -> String {
        let c = &self.config;
        let mut r = Record::default();
        r.push("format_version", self.version);
        r.push("seed", self.seed);
        r.push("clip_count", self.clips.len());
        r.push("joints", c.body.joints);
        r.push("rings_per_bone", c.body.rings_per_bone);
        r.push("verts_per_ring", c.body.verts_per_ring);
        r.push("coarse_stride", c.body.coarse_stride);
        r.push("frames", c.frames);
        r.push("feature_dim", c.feature_dim);
        r.push("motion_amplitude", c.motion_amplitude);
        r.push("noise_std", c.noise_std);
        r.push("image_width", c.image_width);
        r.push("image_height", c.image_height);
        r.push("focal", c.focal);
        r.push("scale_min", c.scale_range.0);
        r.push("scale_max", c.scale_range.1);
        r.push("girth_min", c.girth_range.0);
        r.push("girth_max", c.girth_range.1);
        r.push("feature_seed", c.feature_seed);
        for clip in &self.clips {
            r.push("clip", clip);
        }
        format!("# synthetic motion dataset\n{}", r.render())
    }

    pub fn parse(text: &str) -> Result<Self> {
        const W: &str = "manifest";
        let r = Record::parse(text, W)?;
        let version: u32 = r.require("format_version", W)?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                path: MANIFEST_NAME.into(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let config = SynthConfig {
            body: BodyConfig {
                joints: r.require("joints", W)?,
                rings_per_bone: r.require("rings_per_bone", W)?,
                verts_per_ring: r.require("verts_per_ring", W)?,
                coarse_stride: r.require("coarse_stride", W)?,
            },
            frames: r.require("frames", W)?,
            feature_dim: r.require("feature_dim", W)?,
            motion_amplitude: r.require("motion_amplitude", W)?,
            noise_std: r.require("noise_std", W)?,
            image_width: r.require("image_width", W)?,
            image_height: r.require("image_height", W)?,
            focal: r.require("focal", W)?,
            scale_range: (r.require("scale_min", W)?, r.require("scale_max", W)?),
            girth_range: (r.require("girth_min", W)?, r.require("girth_max", W)?),
            feature_seed: r.require("feature_seed", W)?,
        };
        let clips: Vec<String> = r.all("clip").map(str::to_string).collect();
        let count: usize = r.require("clip_count", W)?;
        if count != clips.len() {
            return Err(Error::Malformed {
                what: W,
                detail: format!("clip_count {count} but {} clip entries", clips.len()),
            });
        }
        Ok(DatasetManifest {
            version,
            seed: r.require("seed", W)?,
            config,
            clips,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<MotionClip>,
}

pub fn clip_file_name(index: usize) -> String {
    format!("clip_{index:04}.bin")
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(b: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        b.extend_from_slice(&x.to_le_bytes());
    }
}

fn dim(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("dimension {v} does not fit the clip format")))
}

pub fn encode_clip(clip: &MotionClip) -> Result<Vec<u8>> {
    let (t, j, v, d) = (clip.frames(), clip.joint_count(), clip.vertex_count(), clip.feature_dim());
    let mut b = Vec::with_capacity(HEADER_LEN + 8 * (t * (j * 5 + v * 3 + d)) + 4);
    b.extend_from_slice(CLIP_MAGIC);
    put_u32(&mut b, FORMAT_VERSION);
    for x in [t, j, v, d] {
        put_u32(&mut b, dim(x)?);
    }
    let cam = &clip.camera;
    put_f64s(&mut b, &[cam.focal, cam.width, cam.height]);
    let rows: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| cam.rotation[(r, c)])).collect();
    put_f64s(&mut b, &rows);
    put_f64s(&mut b, cam.translation.as_slice());
    put_f64s(&mut b, &[clip.body_scale, clip.girth]);
    b.extend_from_slice(&clip.seed.to_le_bytes());
    for tensor in [&clip.joints, &clip.mesh, &clip.pose_2d, &clip.features] {
        put_f64s(&mut b, tensor.data());
    }
    let crc = crc32fast::hash(&b);
    put_u32(&mut b, crc);
    Ok(b)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }

    fn f64(&mut self) -> f64 {
        f64::from_bits(self.u64())
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Parse one clip file; `name` is used in error messages.
pub fn decode_clip(bytes: &[u8], name: &str) -> Result<MotionClip> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { path: name.into() });
    }
    if &bytes[..8] != CLIP_MAGIC {
        return Err(Error::BadMagic { path: name.into() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { path: name.into() });
    }
    let mut r = Reader { bytes, at: 8 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: name.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let [t, j, v, d] = [r.u32(), r.u32(), r.u32(), r.u32()].map(|x| x as usize);
    let payload = t
        .checked_mul(j * 5 + v * 3 + d)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Malformed {
            what: "clip",
            detail: format!("{name}: dimensions overflow"),
        })?;
    let expected = HEADER_LEN + payload + 4;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: name.into() });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed {
            what: "clip",
            detail: format!("{name}: {} trailing bytes", bytes.len() - expected),
        });
    }
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..expected - 4]) != stored {
        return Err(Error::Checksum { clip: name.into() });
    }
    let (focal, width, height) = (r.f64(), r.f64(), r.f64());
    let rotation = Matrix3::from_row_slice(&r.f64s(9));
    let translation = Vector3::from_row_slice(&r.f64s(3));
    let (body_scale, girth) = (r.f64(), r.f64());
    let seed = r.u64();
    let joints = Tensor::new([t, j, 3], r.f64s(t * j * 3))?;
    let mesh = Tensor::new([t, v, 3], r.f64s(t * v * 3))?;
    let pose_2d = Tensor::new([t, j, 2], r.f64s(t * j * 2))?;
    let features = Tensor::new([t, d], r.f64s(t * d))?;
    Ok(MotionClip {
        seed,
        joints,
        mesh,
        pose_2d,
        features,
        camera: Camera {
            focal,
            width,
            height,
            rotation,
            translation,
        },
        body_scale,
        girth,
    })
}

/// Write clips and the manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, seed: u64, config: SynthConfig, clips: &[MotionClip]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let name = clip_file_name(i);
        fs::write(dir.join(&name), encode_clip(clip)?)?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        seed,
        config,
        clips: names,
    };
    fs::write(dir.join(MANIFEST_NAME), manifest.render())?;
    Ok(manifest)
}

/// Generate `count` clips from `seed` and write them.
pub fn generate_dataset(dir: &Path, config: SynthConfig, seed: u64, count: usize) -> Result<Dataset> {
    let clips = Generator::new(config)?.clips(seed, count)?;
    let manifest = write_dataset(dir, seed, config, &clips)?;
    Ok(Dataset { manifest, clips })
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path(dir)).map_err(|e| with_path(e, &manifest_path(dir)))?;
    let manifest = DatasetManifest::parse(&text)?;
    let cfg = &manifest.config;
    let want = (cfg.frames, cfg.body.joints, cfg.body.vertex_count(), cfg.feature_dim);
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for name in &manifest.clips {
        let path = dir.join(name);
        let clip = decode_clip(&fs::read(&path).map_err(|e| with_path(e, &path))?, name)?;
        let got = (clip.frames(), clip.joint_count(), clip.vertex_count(), clip.feature_dim());
        if got != want {
            return Err(Error::Malformed {
                what: "clip",
                detail: format!("{name}: dims {got:?} disagree with manifest {want:?}"),
            });
        }
        clips.push(clip);
    }
    Ok(Dataset { manifest, clips })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SynthConfig {
        SynthConfig::toy(6, 8)
    }

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        out.sort();
        out
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = generate_dataset(a.path(), config(), 7, 3).unwrap();
        let back = read_dataset(a.path()).unwrap();
        assert_eq!(back, ds);
        write_dataset(b.path(), back.manifest.seed, back.manifest.config, &back.clips).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(a.path(), config(), 3, 2).unwrap();
        generate_dataset(b.path(), config(), 3, 2).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
    }

    #[test]
    fn corruption_is_reported_per_kind() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), config(), 1, 2).unwrap();
        let path = dir.path().join(clip_file_name(1));
        let good = fs::read(&path).unwrap();

        let mut flipped = good.clone();
        flipped[HEADER_LEN + 17] ^= 0x40;
        fs::write(&path, &flipped).unwrap();
        match read_dataset(dir.path()).unwrap_err() {
            Error::Checksum { clip } => assert_eq!(clip, "clip_0001.bin"),
            e => panic!("{e}"),
        }

        fs::write(&path, &good[..good.len() - 9]).unwrap();
        assert!(matches!(read_dataset(dir.path()).unwrap_err(), Error::Truncated { .. }));

        let mut versioned = good.clone();
        versioned[8] = 9;
        fs::write(&path, &versioned).unwrap();
        assert!(matches!(read_dataset(dir.path()).unwrap_err(), Error::Version { found: 9, .. }));

        let mut magic = good.clone();
        magic[0] = b'X';
        fs::write(&path, &magic).unwrap();
        assert!(matches!(read_dataset(dir.path()).unwrap_err(), Error::BadMagic { .. }));

        fs::write(&path, &good).unwrap();
        assert!(read_dataset(dir.path()).is_ok());
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(dir.path(), config(), 0, 0).unwrap();
        assert!(ds.clips.is_empty());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.manifest.clips.len(), 0);
        assert!(fs::read_to_string(manifest_path(dir.path())).unwrap().contains("clip_count = 0"));
    }

    #[test]
    fn manifest_round_trips_exactly() {
        let m = DatasetManifest {
            version: FORMAT_VERSION,
            seed: 42,
            config: SynthConfig {
                noise_std: 0.1,
                ..config()
            },
            clips: vec!["clip_0000.bin".into()],
        };
        assert_eq!(DatasetManifest::parse(&m.render()).unwrap(), m);
        let bad = m.render().replace("clip_count = 1", "clip_count = 2");
        assert!(DatasetManifest::parse(&bad).is_err());
    }

    #[test]
    fn regenerating_from_manifest_reproduces_clips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(dir.path(), config(), 11, 2).unwrap();
        let m = read_dataset(dir.path()).unwrap().manifest;
        let again = Generator::new(m.config).unwrap().clips(m.seed, m.clips.len()).unwrap();
        assert_eq!(again, ds.clips);
    }
}
