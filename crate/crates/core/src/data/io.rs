//! Clip directories: `manifest.txt` (key=value), `frames/NNNNNN.png`
//! (8-bit RGB), and flat little-endian f32 arrays with a shape header.
//!
//! Array file layout: magic `LSAR`, `u32` rank, `rank × u64` dims, then the
//! values.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{mel::Mel, Image, Landmarks, Speaker, ToySpeakerSpec, VideoClip, FPS, MEL_BANDS};
use crate::error::{Error, Result};

const ARRAY_MAGIC: &[u8; 4] = b"LSAR";
const CLIP_FORMAT: &str = "lipsync-clip";
const CLIP_VERSION: &str = "1";

pub fn write_array(path: &Path, shape: &[usize], values: &[f32]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    let mut bytes = Vec::with_capacity(8 + 8 * shape.len() + 4 * values.len());
    bytes.extend_from_slice(ARRAY_MAGIC);
    bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != ARRAY_MAGIC {
        return Err(bad("not an array file"));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad("payload size does not match shape"));
    }
    let values = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width(), img.height());
    let mut buf = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((img.get(c, x, y).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    writer
        .write_image_data(&buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported colour type {other:?}",
                path.display()
            )))
        }
    };
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = &buf[(y * w + x) * channels..];
            for c in 0..3 {
                let v = if channels < 3 { px[0] } else { px[c] };
                img.set(c, x, y, v as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

fn speaker_kv(speaker: &Speaker, kv: &mut BTreeMap<String, String>) {
    match speaker {
        Speaker::Toy(s) => {
            kv.insert("speaker.kind".into(), "toy".into());
            kv.insert("speaker.identity_id".into(), s.identity_id.to_string());
            kv.insert("speaker.face_hue".into(), s.face_hue.to_string());
            kv.insert("speaker.face_width_frac".into(), s.face_width_frac.to_string());
            kv.insert("speaker.mouth_gain".into(), s.mouth_gain.to_string());
            kv.insert("speaker.mouth_rest_open".into(), s.mouth_rest_open.to_string());
        }
        Speaker::Opaque(id) => {
            kv.insert("speaker.kind".into(), "opaque".into());
            kv.insert("speaker.id".into(), id.clone());
        }
    }
}

fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    kv.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))
}

fn parse<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    get(kv, key)?
        .parse()
        .map_err(|_| Error::Format(format!("manifest key `{key}` is malformed")))
}

fn speaker_from_kv(kv: &BTreeMap<String, String>) -> Result<Speaker> {
    match get(kv, "speaker.kind")? {
        "toy" => Ok(Speaker::Toy(ToySpeakerSpec {
            identity_id: parse(kv, "speaker.identity_id")?,
            face_hue: parse(kv, "speaker.face_hue")?,
            face_width_frac: parse(kv, "speaker.face_width_frac")?,
            mouth_gain: parse(kv, "speaker.mouth_gain")?,
            mouth_rest_open: parse(kv, "speaker.mouth_rest_open")?,
        })),
        _ => Ok(Speaker::Opaque(
            kv.get("speaker.id").cloned().unwrap_or_default(),
        )),
    }
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{t:06}.png"))
}

/// Writes a clip directory; `dir` is created (and must be owned by a single
/// writer).
pub fn save_clip(clip: &VideoClip, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir, e))?;
    let mut kv = BTreeMap::new();
    kv.insert("format".into(), CLIP_FORMAT.into());
    kv.insert("version".into(), CLIP_VERSION.into());
    kv.insert("size".into(), clip.size().to_string());
    kv.insert("frames".into(), clip.len().to_string());
    kv.insert("fps".into(), FPS.to_string());
    kv.insert("sample_rate".into(), super::SAMPLE_RATE.to_string());
    speaker_kv(&clip.speaker, &mut kv);
    for (t, f) in clip.frames.iter().enumerate() {
        write_png(&frame_path(dir, t), f)?;
    }
    write_array(&dir.join("waveform.f32"), &[clip.waveform.len()], &clip.waveform)?;
    write_array(
        &dir.join("mel.f32"),
        &[clip.mel.steps(), MEL_BANDS],
        clip.mel.values(),
    )?;
    if let Some(o) = &clip.mouth_open_gt {
        write_array(&dir.join("mouth_open.f32"), &[o.len()], o)?;
    }
    if let Some(e) = &clip.envelope {
        write_array(&dir.join("envelope.f32"), &[e.len()], e)?;
    }
    if let Some(l) = &clip.landmarks_gt {
        let flat: Vec<f32> = l.iter().flat_map(|lm| lm.iter().flatten().copied()).collect();
        write_array(&dir.join("landmarks.f32"), &[l.len(), 4, 2], &flat)?;
    }
    let manifest = dir.join("manifest.txt");
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(format_kv(&kv).as_bytes())
        .map_err(|e| Error::io(&manifest, e))
}

fn read_optional(dir: &Path, name: &str) -> Result<Option<(Vec<usize>, Vec<f32>)>> {
    let p = dir.join(name);
    if p.exists() {
        read_array(&p).map(Some)
    } else {
        Ok(None)
    }
}

pub fn load_clip(dir: &Path) -> Result<VideoClip> {
    let manifest = dir.join("manifest.txt");
    let mut text = String::new();
    fs::File::open(&manifest)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(&manifest, e))?;
    let kv = parse_kv(&text)?;
    if get(&kv, "format")? != CLIP_FORMAT || get(&kv, "version")? != CLIP_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported clip format",
            manifest.display()
        )));
    }
    let fps: usize = parse(&kv, "fps")?;
    if fps != FPS {
        return Err(Error::Format(format!("only {FPS} fps clips are supported")));
    }
    let size: usize = parse(&kv, "size")?;
    let n: usize = parse(&kv, "frames")?;
    let frames = (0..n)
        .map(|t| {
            let img = read_png(&frame_path(dir, t))?;
            if img.width() != size || img.height() != size {
                return Err(Error::Format(format!(
                    "frame {t} is {}x{}, manifest says {size}",
                    img.width(),
                    img.height()
                )));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, waveform) = read_array(&dir.join("waveform.f32"))?;
    let mel = match read_optional(dir, "mel.f32")? {
        Some((shape, values)) => Mel::from_values(shape[0], values)?,
        None => super::compute_mel(&waveform, super::SAMPLE_RATE)?,
    };
    let landmarks_gt = read_optional(dir, "landmarks.f32")?.map(|(_, v)| {
        v.chunks_exact(8)
            .map(|c| -> Landmarks { [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]], [c[6], c[7]]] })
            .collect()
    });
    let clip = VideoClip {
        frames,
        waveform,
        mel,
        mouth_open_gt: read_optional(dir, "mouth_open.f32")?.map(|(_, v)| v),
        envelope: read_optional(dir, "envelope.f32")?.map(|(_, v)| v),
        landmarks_gt,
        speaker: speaker_from_kv(&kv)?,
    };
    clip.validate()?;
    Ok(clip)
}

/// Clip directories under `root` (those holding a `manifest.txt`), sorted by
/// name.
pub fn list_clips(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.txt").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<VideoClip>> {
    let dirs = list_clips(root)?;
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no clip directories under {}",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_clip(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_clip;

    #[test]
    fn clip_directory_round_trip_is_exact() {
        let spec = ToySpeakerSpec {
            identity_id: 4,
            face_hue: 0.3,
            face_width_frac: 0.7,
            mouth_gain: 0.6,
            mouth_rest_open: 0.02,
        };
        let clip = synthesize_clip(&spec, 0.4, 9, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_clip(&clip, dir.path()).unwrap();
        let back = load_clip(dir.path()).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn corrupt_array_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f32");
        write_array(&p, &[3], &[1.0, 2.0, 3.0]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(read_array(&p).is_err());
    }

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# c\na=1\n\n b = two \n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two");
        assert!(parse_kv("novalue").is_err());
    }
}
