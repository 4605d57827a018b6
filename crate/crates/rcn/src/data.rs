//! Sequences, ground truth, and their on-disk layout:
//! `DIR/<split>/<seq_id>/frame_%05d.pgm` plus `gt.txt` with lines
//! `frame_idx track_id class x y w h` (class 1 target, 0 distractor).

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::localizer::BoundingBox;
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Format(format!("image {width}x{height} with {} bytes", data.len())));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `[1, H, W]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.iter().map(|&v| v as f64 / 255.0).collect())
            .expect("dims match data")
    }

    pub fn write_pgm(&self, out: &mut impl Write) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)?;
        Ok(())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() + 16);
        self.write_pgm(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(Error::Format("not a binary PGM (P5)".into()));
        }
        let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if maxval != 255 {
            return Err(Error::Format(format!("PGM maxval {maxval} unsupported (expected 255)")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let end = start + width * height;
        if end > bytes.len() {
            return Err(Error::Format("truncated PGM raster".into()));
        }
        GrayImage::new(width, height, bytes[start..end].to_vec())
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_pgm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectClass {
    Distractor,
    Target,
}

impl ObjectClass {
    pub fn code(self) -> u8 {
        match self {
            ObjectClass::Distractor => 0,
            ObjectClass::Target => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(ObjectClass::Distractor),
            1 => Ok(ObjectClass::Target),
            _ => Err(Error::Format(format!("class must be 0 or 1, got {c}"))),
        }
    }
}

/// One object's boxes over consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u32,
    pub class: ObjectClass,
    /// `(frame index, box)`, indices strictly increasing by one.
    pub boxes: Vec<(usize, BoundingBox)>,
}

impl Track {
    pub fn box_at(&self, frame: usize) -> Option<&BoundingBox> {
        let first = self.boxes.first()?.0;
        self.boxes.get(frame.checked_sub(first)?).map(|(_, b)| b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub id: String,
    pub frames: Vec<GrayImage>,
    pub tracks: Vec<Track>,
}

impl SequenceSample {
    pub fn frame_dims(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| f.dims())
    }

    /// Ground-truth boxes present in `frame`, with their classes.
    pub fn boxes_at(&self, frame: usize) -> Vec<(ObjectClass, BoundingBox)> {
        self.tracks.iter().filter_map(|t| t.box_at(frame).map(|b| (t.class, *b))).collect()
    }
}

pub fn format_gt(tracks: &[Track]) -> String {
    let mut rows: Vec<(usize, u32, &Track, &BoundingBox)> =
        tracks.iter().flat_map(|t| t.boxes.iter().map(move |(f, b)| (*f, t.id, t, b))).collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut s = String::new();
    for (f, id, t, b) in rows {
        writeln!(s, "{f} {id} {} {} {} {} {}", t.class.code(), b.x, b.y, b.w, b.h).expect("string write");
    }
    s
}

pub fn parse_gt(reader: impl BufRead) -> Result<Vec<Track>> {
    let mut tracks: Vec<Track> = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("gt.txt line {}: {what}: {line:?}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let frame: usize = f[0].parse().map_err(|_| bad("frame index"))?;
        let id: u32 = f[1].parse().map_err(|_| bad("track id"))?;
        let class = ObjectClass::from_code(f[2].parse().map_err(|_| bad("class"))?)?;
        let v: Vec<f64> = f[3..].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad("box"))?;
        let b = BoundingBox::new(v[0], v[1], v[2], v[3]).map_err(|_| bad("box"))?;
        match tracks.iter_mut().find(|t| t.id == id) {
            Some(t) => {
                if t.class != class {
                    return Err(bad("class changes within a track"));
                }
                let last = t.boxes.last().map(|x| x.0).unwrap_or(0);
                if frame != last + 1 {
                    return Err(bad("track frames must be contiguous"));
                }
                t.boxes.push((frame, b));
            }
            None => tracks.push(Track { id, class, boxes: vec![(frame, b)] }),
        }
    }
    tracks.sort_by_key(|t| t.id);
    Ok(tracks)
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:05}.pgm")
}

pub fn write_sequence(dir: &Path, seq: &SequenceSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_pgm(&dir.join(frame_name(i)))?;
    }
    fs::write(dir.join("gt.txt"), format_gt(&seq.tracks))?;
    Ok(())
}

pub fn read_sequence(dir: &Path) -> Result<SequenceSample> {
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut frames = Vec::new();
    loop {
        let p = dir.join(frame_name(frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(GrayImage::load_pgm(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::Format(format!("{}: no frames", dir.display())));
    }
    let gt = dir.join("gt.txt");
    let tracks = if gt.exists() { parse_gt(BufReader::new(fs::File::open(&gt)?))? } else { Vec::new() };
    Ok(SequenceSample { id, frames, tracks })
}

/// Sequence directories of `root` in name order.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn read_split(root: &Path) -> Result<Vec<SequenceSample>> {
    sequence_dirs(root)?.iter().map(|d| read_sequence(d)).collect()
}

/// Ground truth only, without decoding frames.
pub fn read_split_gt(root: &Path) -> Result<Vec<(String, Vec<Track>)>> {
    sequence_dirs(root)?
        .iter()
        .map(|d| {
            let id = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let tracks = parse_gt(BufReader::new(fs::File::open(d.join("gt.txt"))?))?;
            Ok((id, tracks))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_with_comment() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert_eq!(&buf[..11], b"P5\n3 2\n255\n");
        assert_eq!(GrayImage::read_pgm(&buf).unwrap(), img);
        let commented = b"P5\n# made by hand\n3 2\n255\n\x00\x01\x02\xfd\xfe\xff";
        assert_eq!(GrayImage::read_pgm(commented).unwrap(), img);
        assert!(GrayImage::read_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::read_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }

    #[test]
    fn gt_round_trip() {
        let b = |x, y| BoundingBox::new(x, y, 12.0, 10.5).unwrap();
        let tracks = vec![
            Track { id: 0, class: ObjectClass::Target, boxes: vec![(0, b(1.0, 2.0)), (1, b(3.0, 4.0))] },
            Track { id: 1, class: ObjectClass::Distractor, boxes: vec![(1, b(50.0, 60.0))] },
        ];
        let text = format_gt(&tracks);
        assert_eq!(text.lines().next().unwrap(), "0 0 1 1 2 12 10.5");
        assert_eq!(parse_gt(text.as_bytes()).unwrap(), tracks);
        assert_eq!(tracks[0].box_at(1), Some(&b(3.0, 4.0)));
        assert_eq!(tracks[1].box_at(0), None);
    }

    #[test]
    fn gt_rejects_gaps_and_bad_fields() {
        assert!(parse_gt("0 0 1 0 0 5 5\n2 0 1 0 0 5 5\n".as_bytes()).is_err());
        assert!(parse_gt("0 0 3 0 0 5 5\n".as_bytes()).is_err());
        assert!(parse_gt("0 0 1 0 0 -5 5\n".as_bytes()).is_err());
        assert!(parse_gt("0 0 1 0 0 5\n".as_bytes()).is_err());
    }

    #[test]
    fn sequence_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = SequenceSample {
            id: "seq_0000".into(),
            frames: vec![GrayImage::filled(4, 3, 7), GrayImage::filled(4, 3, 9)],
            tracks: vec![Track { id: 2, class: ObjectClass::Target, boxes: vec![(0, BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap())] }],
        };
        let p = dir.path().join("seq_0000");
        write_sequence(&p, &seq).unwrap();
        assert_eq!(read_sequence(&p).unwrap(), seq);
        assert_eq!(read_split(dir.path()).unwrap(), vec![seq]);
    }
}
