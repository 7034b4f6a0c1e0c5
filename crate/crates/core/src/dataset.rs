//! Synthetic glyph-string corpus: rendering, the `GTCC` container and the
//! split manifest.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "GTCC" | version u16 | alphabet_len u32 | alphabet UTF-8
//! records until EOF:
//!   label_len u16 | label indices u16 * label_len | height u16 | width u16 | pixels u8 * (height*width)
//! ```
//!
//! Record ids are their zero-based position in the file. The manifest is a
//! text file of `id<TAB>split` lines.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::ctc::{Alphabet, LabelSequence};
use crate::encoder::GrayImage;
use crate::error::{Error, Result};
use crate::rng::{domain, stream, SplitMix64};
use rand::{Rng, RngCore};

pub const CORPUS_MAGIC: &[u8; 4] = b"GTCC";
pub const CORPUS_VERSION: u16 = 1;

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;

// Rows top to bottom, bit 4 is the leftmost column.
const LETTERS: [[u8; 7]; 26] = [
    [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // C
    [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E], // D
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10], // F
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F], // G
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // I
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C], // J
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11], // M
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11], // N
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // O
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10], // P
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D], // Q
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // S
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // U
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // V
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A], // W
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04], // Y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
];

const DIGITS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
];

/// Built-in 5x7 bitmap font covering `A-Z` and `0-9`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlyphFont;

impl GlyphFont {
    pub fn glyph(&self, c: char) -> Option<&'static [u8; 7]> {
        match c {
            'A'..='Z' => Some(&LETTERS[c as usize - 'A' as usize]),
            '0'..='9' => Some(&DIGITS[c as usize - '0' as usize]),
            _ => None,
        }
    }

    pub fn is_set(&self, c: char, row: usize, col: usize) -> bool {
        self.glyph(c)
            .is_some_and(|g| g[row] & (1 << (GLYPH_WIDTH - 1 - col)) != 0)
    }

    pub fn check_alphabet(&self, alphabet: &Alphabet) -> Result<()> {
        match alphabet.symbols().iter().find(|&&c| self.glyph(c).is_none()) {
            Some(c) => Err(Error::Config(format!("no glyph for symbol {c:?}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: u64,
    pub image: GrayImage,
    pub label: LabelSequence,
}

/// Generation parameters. Spacing and jitter are in output pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub alphabet: String,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Half-width of the additive uniform pixel noise.
    pub noise: f64,
    /// Maximum absolute vertical shift per glyph.
    pub jitter: usize,
    pub spacing_min: usize,
    pub spacing_max: usize,
    pub seed: u64,
    pub height: usize,
    pub max_width: usize,
    /// Integer upscaling of the 5x7 bitmaps.
    pub glyph_scale: usize,
    /// Pixels per output frame of the recognizer, for the feasibility check.
    pub frame_stride: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            alphabet: "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789".into(),
            count: 1000,
            min_len: 1,
            max_len: 5,
            noise: 0.1,
            jitter: 2,
            spacing_min: 1,
            spacing_max: 4,
            seed: 0,
            height: 32,
            max_width: 128,
            glyph_scale: 4,
            frame_stride: 4,
        }
    }
}

impl CorpusSpec {
    pub fn glyph_width(&self) -> usize {
        GLYPH_WIDTH * self.glyph_scale
    }

    fn worst_width(&self, len: usize) -> usize {
        len * self.glyph_width() + (len + 1) * self.spacing_max
    }

    pub fn validate(&self) -> Result<Alphabet> {
        let alphabet = Alphabet::new(&self.alphabet)?;
        GlyphFont.check_alphabet(&alphabet)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length range [{}, {}] invalid", self.min_len, self.max_len));
        }
        if self.spacing_min > self.spacing_max {
            return bad("spacing_min > spacing_max".into());
        }
        if self.glyph_scale == 0 || GLYPH_HEIGHT * self.glyph_scale > self.height {
            return bad(format!(
                "glyph scale {} does not fit height {}",
                self.glyph_scale, self.height
            ));
        }
        if self.worst_width(self.max_len) > self.max_width {
            return bad(format!(
                "{} glyphs need up to {} px, cap is {}",
                self.max_len,
                self.worst_width(self.max_len),
                self.max_width
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) || self.frame_stride == 0 {
            return bad("noise must lie in [0, 1] and frame_stride be positive".into());
        }
        Ok(alphabet)
    }
}

/// Renders `text` left to right with sampled spacing, per-glyph vertical
/// jitter and clamped additive noise.
pub fn render(text: &str, spec: &CorpusSpec, rng: &mut SplitMix64) -> Result<(GrayImage, LabelSequence)> {
    let alphabet = Alphabet::new(&spec.alphabet)?;
    let label = alphabet.encode(text)?;
    let chars: Vec<char> = text.chars().collect();
    for &c in &chars {
        if GlyphFont.glyph(c).is_none() {
            return Err(Error::Config(format!("no glyph for symbol {c:?}")));
        }
    }
    let scale = spec.glyph_scale;
    let (gw, gh) = (spec.glyph_width(), GLYPH_HEIGHT * scale);
    if gh > spec.height {
        return Err(Error::Config("glyphs taller than image".into()));
    }
    let spacing = |rng: &mut SplitMix64| rng.random_range(spec.spacing_min..=spec.spacing_max);
    let base_y = ((spec.height - gh) / 2) as i64;
    let max_y = (spec.height - gh) as i64;
    let mut placements = Vec::with_capacity(chars.len());
    let mut x = spacing(rng);
    for (i, &c) in chars.iter().enumerate() {
        if i > 0 {
            x += spacing(rng);
        }
        let j = spec.jitter as i64;
        let y = (base_y + rng.random_range(-j..=j)).clamp(0, max_y) as usize;
        placements.push((c, x, y));
        x += gw;
    }
    let width = (x + spacing(rng)).max(1);
    if width > spec.max_width {
        return Err(Error::Config(format!(
            "label {text:?} needs {width} px, cap is {}",
            spec.max_width
        )));
    }
    let mut canvas = vec![0.0f64; spec.height * width];
    for &(c, x0, y0) in &placements {
        for row in 0..GLYPH_HEIGHT {
            for col in 0..GLYPH_WIDTH {
                if !GlyphFont.is_set(c, row, col) {
                    continue;
                }
                for dy in 0..scale {
                    let r = y0 + row * scale + dy;
                    let start = r * width + x0 + col * scale;
                    canvas[start..start + scale].iter_mut().for_each(|p| *p = 1.0);
                }
            }
        }
    }
    let pixels = canvas
        .into_iter()
        .map(|v| {
            let v = if spec.noise > 0.0 {
                (v + (2.0 * rng.random::<f64>() - 1.0) * spec.noise).clamp(0.0, 1.0)
            } else {
                v
            };
            (v * 255.0).round() as u8
        })
        .collect();
    Ok((GrayImage::new(spec.height, width, pixels)?, label))
}

/// Samples a label and renders sample `id` from its own sub-seeded stream.
pub fn generate_sample(spec: &CorpusSpec, alphabet: &Alphabet, id: u64) -> Result<Sample> {
    let mut rng = stream(spec.seed, domain::SAMPLE, id);
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let text: String = (0..len)
        .map(|_| alphabet.symbols()[rng.random_range(0..alphabet.len())])
        .collect();
    let (image, label) = render(&text, spec, &mut rng)?;
    let frames = image.width.div_ceil(spec.frame_stride);
    if label.min_frames() > frames {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            min_frames: label.min_frames(),
            frames,
        });
    }
    Ok(Sample { id, image, label })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// 80/10/10 assignment: ids ordered by their hash, then cut.
pub fn split_assignments(count: usize, seed: u64) -> Vec<Split> {
    let mut ids: Vec<u64> = (0..count as u64).collect();
    ids.sort_by_key(|&id| (stream(seed, domain::SPLIT, id).next_u64(), id));
    let n_train = (count * 8).div_ceil(10).min(count);
    let n_val = (count - n_train).div_ceil(2);
    let mut out = vec![Split::Test; count];
    for (rank, &id) in ids.iter().enumerate() {
        out[id as usize] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

pub fn manifest_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".split");
    PathBuf::from(s)
}

pub fn write_manifest(path: &Path, splits: &[Split]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, s) in splits.iter().enumerate() {
        writeln!(w, "{id}\t{}", s.as_str())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(u64, Split)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format {
            offset: n as u64,
            msg: format!("manifest line {}: {line:?}", n + 1),
        };
        let (id, split) = line.split_once('\t').ok_or_else(bad)?;
        out.push((id.parse().map_err(|_| bad())?, Split::parse(split).map_err(|_| bad())?));
    }
    Ok(out)
}

/// Streaming writer for the container.
pub struct CorpusWriter<W: Write> {
    inner: W,
}

impl<W: Write> CorpusWriter<W> {
    pub fn new(mut inner: W, alphabet: &Alphabet) -> Result<Self> {
        let alpha = alphabet.as_string();
        inner.write_all(CORPUS_MAGIC)?;
        inner.write_all(&CORPUS_VERSION.to_le_bytes())?;
        inner.write_all(&(alpha.len() as u32).to_le_bytes())?;
        inner.write_all(alpha.as_bytes())?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, sample: &Sample) -> Result<()> {
        let to_u16 = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} exceeds u16")))
        };
        let w = &mut self.inner;
        w.write_all(&to_u16(sample.label.len(), "label length")?.to_le_bytes())?;
        for &i in &sample.label.indices {
            w.write_all(&to_u16(i, "label index")?.to_le_bytes())?;
        }
        w.write_all(&to_u16(sample.image.height, "height")?.to_le_bytes())?;
        w.write_all(&to_u16(sample.image.width, "width")?.to_le_bytes())?;
        w.write_all(&sample.image.pixels)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streaming reader; yields records in file order with ids 0, 1, ...
pub struct CorpusReader<R: Read> {
    inner: R,
    alphabet: Alphabet,
    offset: u64,
    next_id: u64,
    failed: bool,
}

impl<R: Read> CorpusReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact_at(&mut inner, &mut magic, &mut offset, "magic")?;
        if &magic != CORPUS_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}"),
            });
        }
        let mut b2 = [0u8; 2];
        read_exact_at(&mut inner, &mut b2, &mut offset, "version")?;
        let version = u16::from_le_bytes(b2);
        if version != CORPUS_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let mut b4 = [0u8; 4];
        read_exact_at(&mut inner, &mut b4, &mut offset, "alphabet length")?;
        let mut alpha = vec![0u8; u32::from_le_bytes(b4) as usize];
        let at = offset;
        read_exact_at(&mut inner, &mut alpha, &mut offset, "alphabet")?;
        let alpha = String::from_utf8(alpha).map_err(|_| Error::Format {
            offset: at,
            msg: "alphabet is not UTF-8".into(),
        })?;
        let alphabet = Alphabet::new(&alpha).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        Ok(Self {
            inner,
            alphabet,
            offset,
            next_id: 0,
            failed: false,
        })
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    fn read_record(&mut self) -> Result<Option<Sample>> {
        let start = self.offset;
        let mut b2 = [0u8; 2];
        // Clean EOF is only allowed on a record boundary.
        let n = read_fully(&mut self.inner, &mut b2)?;
        if n == 0 {
            return Ok(None);
        }
        if n < 2 {
            return Err(Error::Format {
                offset: start,
                msg: "truncated record header".into(),
            });
        }
        self.offset += 2;
        let len = u16::from_le_bytes(b2) as usize;
        let mut indices = Vec::with_capacity(len);
        for _ in 0..len {
            read_exact_at(&mut self.inner, &mut b2, &mut self.offset, "label index")?;
            let i = u16::from_le_bytes(b2) as usize;
            if i >= self.alphabet.len() {
                return Err(Error::Format {
                    offset: self.offset - 2,
                    msg: format!("label index {i} outside alphabet"),
                });
            }
            indices.push(i);
        }
        read_exact_at(&mut self.inner, &mut b2, &mut self.offset, "height")?;
        let height = u16::from_le_bytes(b2) as usize;
        read_exact_at(&mut self.inner, &mut b2, &mut self.offset, "width")?;
        let width = u16::from_le_bytes(b2) as usize;
        if height == 0 || width == 0 {
            return Err(Error::Format {
                offset: self.offset - 4,
                msg: format!("empty image {height}x{width}"),
            });
        }
        let mut pixels = vec![0u8; height * width];
        read_exact_at(&mut self.inner, &mut pixels, &mut self.offset, "pixels")?;
        let id = self.next_id;
        self.next_id += 1;
        Ok(Some(Sample {
            id,
            image: GrayImage { height, width, pixels },
            label: LabelSequence::new(indices),
        }))
    }
}

impl<R: Read> Iterator for CorpusReader<R> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.read_record() {
            Ok(Some(s)) => Some(Ok(s)),
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    let n = read_fully(r, buf)?;
    if n < buf.len() {
        return Err(Error::Format {
            offset: *offset + n as u64,
            msg: format!("truncated {what}: wanted {} bytes, got {n}", buf.len()),
        });
    }
    *offset += n as u64;
    Ok(())
}

/// Decoded corpus held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub alphabet: Alphabet,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Samples listed under `split` in the manifest, in id order.
    pub fn select(&self, split: Split, manifest: &[(u64, Split)]) -> Vec<Sample> {
        let mut wanted: Vec<u64> = manifest.iter().filter(|(_, s)| *s == split).map(|(id, _)| *id).collect();
        wanted.sort_unstable();
        self.samples
            .iter()
            .filter(|s| wanted.binary_search(&s.id).is_ok())
            .cloned()
            .collect()
    }
}

/// Generates `spec.count` samples in memory.
pub fn generate_samples(spec: &CorpusSpec) -> Result<Corpus> {
    let alphabet = spec.validate()?;
    let samples = (0..spec.count as u64)
        .map(|id| generate_sample(spec, &alphabet, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { alphabet, samples })
}

/// Writes the container to `path` and the split manifest next to it.
pub fn generate_corpus(spec: &CorpusSpec, path: &Path) -> Result<Corpus> {
    let corpus = generate_samples(spec)?;
    write_corpus(&corpus, path)?;
    write_manifest(&manifest_path(path), &split_assignments(spec.count, spec.seed))?;
    Ok(corpus)
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = CorpusWriter::new(BufWriter::new(File::create(path)?), &corpus.alphabet)?;
    for s in &corpus.samples {
        w.write(s)?;
    }
    w.finish()?;
    Ok(())
}

pub fn open_corpus(path: &Path) -> Result<CorpusReader<BufReader<File>>> {
    CorpusReader::new(BufReader::new(File::open(path)?))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let reader = open_corpus(path)?;
    let alphabet = reader.alphabet().clone();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok(Corpus { alphabet, samples })
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", image.width, image.height)?;
    w.write_all(&image.pixels)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                msg: "truncated PGM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("not a binary PGM (magic {:?})", fields[0]),
        });
    }
    let num = |i: usize| {
        fields[i].parse::<usize>().map_err(|_| Error::Format {
            offset: 0,
            msg: format!("bad PGM header field {:?}", fields[i]),
        })
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unsupported maxval {maxval}"),
        });
    }
    pos += 1;
    let body = bytes.get(pos..pos + width * height).ok_or(Error::Format {
        offset: bytes.len() as u64,
        msg: "truncated PGM pixel data".into(),
    })?;
    let pixels = body.iter().map(|&p| ((p as usize * 255) / maxval) as u8).collect();
    GrayImage::new(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn quiet_spec() -> CorpusSpec {
        CorpusSpec {
            alphabet: "AB".into(),
            count: 10,
            min_len: 1,
            max_len: 3,
            noise: 0.0,
            jitter: 0,
            spacing_min: 2,
            spacing_max: 2,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn letter_a_footprint_is_exact() {
        let spec = quiet_spec();
        let (img, label) = render("A", &spec, &mut SplitMix64::seed_from_u64(0)).unwrap();
        assert_eq!(label.indices, vec![0]);
        let s = spec.glyph_scale;
        assert_eq!(img.width, 2 + 5 * s + 2);
        let y0 = (32 - 7 * s) / 2;
        for r in 0..img.height {
            for c in 0..img.width {
                let inside = r >= y0 && r < y0 + 7 * s && c >= 2 && c < 2 + 5 * s;
                let want = inside && GlyphFont.is_set('A', (r - y0.min(r)) / s, (c.max(2) - 2) / s);
                assert_eq!(img.get(r, c) == 255, want, "pixel ({r},{c})");
                assert!(img.get(r, c) == 0 || img.get(r, c) == 255);
            }
        }
    }

    #[test]
    fn same_seed_renders_identically() {
        let spec = CorpusSpec { noise: 0.2, jitter: 2, ..quiet_spec() };
        let a = render("ABBA", &CorpusSpec { max_len: 4, ..spec.clone() }, &mut SplitMix64::seed_from_u64(5)).unwrap();
        let b = render("ABBA", &CorpusSpec { max_len: 4, ..spec }, &mut SplitMix64::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_long_label_is_rejected() {
        let spec = CorpusSpec { max_width: 30, ..quiet_spec() };
        assert!(render("AB", &spec, &mut SplitMix64::seed_from_u64(0)).is_err());
    }

    #[test]
    fn splits_are_exact_80_10_10() {
        let s = split_assignments(100, 7);
        let count = |x| s.iter().filter(|&&y| y == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (80, 10, 10));
    }

    #[test]
    fn two_symbol_fixed_length_labels() {
        let spec = CorpusSpec { min_len: 2, max_len: 2, count: 40, ..quiet_spec() };
        let corpus = generate_samples(&spec).unwrap();
        for s in &corpus.samples {
            let text = corpus.alphabet.render(&s.label);
            assert!(["AA", "AB", "BA", "BB"].contains(&text.as_str()));
        }
    }

    #[test]
    fn round_trip_and_truncation() {
        let spec = CorpusSpec { noise: 0.3, ..quiet_spec() };
        let corpus = generate_samples(&spec).unwrap();
        let mut buf = Vec::new();
        let mut w = CorpusWriter::new(&mut buf, &corpus.alphabet).unwrap();
        for s in &corpus.samples {
            w.write(s).unwrap();
        }
        w.finish().unwrap();
        let back: Vec<Sample> = CorpusReader::new(&buf[..]).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(back, corpus.samples);

        let cut = &buf[..buf.len() - 7];
        let results: Vec<Result<Sample>> = CorpusReader::new(cut).unwrap().collect();
        assert!(matches!(results.last(), Some(Err(Error::Format { .. }))));
    }

    #[test]
    fn empty_corpus_yields_nothing() {
        let mut buf = Vec::new();
        CorpusWriter::new(&mut buf, &Alphabet::new("AB").unwrap()).unwrap().finish().unwrap();
        assert_eq!(CorpusReader::new(&buf[..]).unwrap().count(), 0);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        assert!(matches!(CorpusReader::new(&b"XXXX\x01\x00"[..]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::new(2, 3, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let mut bytes = b"P5\n# comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&img.pixels);
        assert_eq!(parse_pgm(&bytes).unwrap(), img);
        assert!(parse_pgm(b"P5\n3 2\n255\n\x00").is_err());
        assert!(parse_pgm(b"garbage").is_err());
    }

    #[test]
    fn every_symbol_has_a_glyph() {
        let spec = CorpusSpec::default();
        assert!(spec.validate().is_ok());
        assert!(GlyphFont.check_alphabet(&Alphabet::new("ab").unwrap()).is_err());
    }
}
