//! Procedural paired try-on data: textured torso silhouettes on gradient
//! backgrounds, patterned garments rendered both worn and in-shop (on
//! white), and inpaint masks that cover exactly the garment region.
//!
//! Everything derives from a scene seed, so a manifest of seeds regenerates
//! the dataset byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image_io::{self, BitMask, RgbImage};
use crate::rng::{Purpose, Stream};

/// Garment texture family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
    LogoGlyph,
}

impl Pattern {
    pub const ALL: [Pattern; 4] =
        [Pattern::Solid, Pattern::Stripes, Pattern::Checker, Pattern::LogoGlyph];

    pub fn name(&self) -> &'static str {
        match self {
            Pattern::Solid => "solid",
            Pattern::Stripes => "stripes",
            Pattern::Checker => "checker",
            Pattern::LogoGlyph => "logo-glyph",
        }
    }

    pub fn parse(s: &str) -> Result<Pattern> {
        Pattern::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pattern {s:?}")))
    }
}

/// 5x7 glyph bitmaps for the logo pattern.
const GLYPHS: [[u8; 7]; 4] = [
    // diamond
    [0b00100, 0b01110, 0b11111, 0b11111, 0b11111, 0b01110, 0b00100],
    // ring
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
    // cross
    [0b00100, 0b00100, 0b11111, 0b11111, 0b00100, 0b00100, 0b00100],
    // zig
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
];

/// Full description of one scene; rendering is a pure function of this.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub bg_top: [u8; 3],
    pub bg_bottom: [u8; 3],
    pub skin: [u8; 3],
    pub head_cx: usize,
    pub head_cy: usize,
    pub head_r: usize,
    pub torso: [usize; 4],       // x0, y0, x1, y1 (exclusive ends)
    pub pattern: Pattern,
    pub color_a: [u8; 3],
    pub color_b: [u8; 3],
    pub cell: usize,
    pub glyph: usize,
    pub garment_box: [usize; 4], // x0, y0, x1, y1 (exclusive ends)
}

const SKIN_TONES: [[u8; 3]; 4] =
    [[224, 172, 105], [198, 134, 66], [141, 85, 36], [255, 219, 172]];

impl SceneSpec {
    /// Draw a scene deterministically from `seed` on the given canvas.
    pub fn random(seed: u64, canvas_h: usize, canvas_w: usize) -> Result<SceneSpec> {
        if canvas_h % 8 != 0 || canvas_w % 8 != 0 || canvas_h < 32 || canvas_w < 24 {
            return Err(Error::invalid(
                "scene_spec",
                format!("canvas {canvas_h}x{canvas_w} must be >= 32x24 and divisible by 8"),
            ));
        }
        let mut s = Stream::derive(seed, Purpose::SceneSpec, 0);
        let (h, w) = (canvas_h, canvas_w);
        fn color(s: &mut Stream, lo: u64, hi: u64) -> [u8; 3] {
            [
                (lo + s.next_u64() % (hi - lo)) as u8,
                (lo + s.next_u64() % (hi - lo)) as u8,
                (lo + s.next_u64() % (hi - lo)) as u8,
            ]
        }
        let bg_top = color(&mut s, 40, 140);
        let bg_bottom = color(&mut s, 40, 140);
        let skin = SKIN_TONES[s.below(SKIN_TONES.len())];

        let head_r = h / 14 + s.below(h / 24 + 1);
        let head_cx = w / 2 - w / 16 + s.below(w / 8 + 1);
        let head_cy = h / 8 + s.below(h / 16 + 1);

        let ty0 = head_cy + head_r + 1 + s.below(h / 24 + 1);
        let ty1 = h - h / 12 - s.below(h / 12 + 1);
        let tx0 = w / 6 + s.below(w / 12 + 1);
        let tx1 = w - w / 6 - s.below(w / 12 + 1);

        let pattern = Pattern::ALL[s.below(4)];
        let color_a = color(&mut s, 30, 226);
        let mut color_b = color(&mut s, 30, 226);
        // keep the two pattern colors visually distinct
        while color_a
            .iter()
            .zip(&color_b)
            .map(|(a, b)| (*a as i32 - *b as i32).abs())
            .sum::<i32>()
            < 120
        {
            color_b = color(&mut s, 30, 226);
        }
        let cell = 2 + s.below(4);
        let glyph = s.below(GLYPHS.len());

        let gy0 = ty0 + s.below((h / 16).max(1));
        let torso_h = ty1.saturating_sub(gy0).max(4);
        let gy1 = gy0 + torso_h * 2 / 5 + s.below(torso_h / 4 + 1);
        let gx0 = tx0 + s.below((w / 24).max(1));
        let gx1 = tx1 - s.below((w / 24).max(1));

        let spec = SceneSpec {
            seed,
            canvas_h,
            canvas_w,
            bg_top,
            bg_bottom,
            skin,
            head_cx,
            head_cy,
            head_r,
            torso: [tx0, ty0, tx1, ty1.max(ty0 + 4)],
            pattern,
            color_a,
            color_b,
            cell,
            glyph,
            garment_box: [gx0, gy0, gx1.max(gx0 + 4), gy1.min(h - 1).max(gy0 + 4)],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let [gx0, gy0, gx1, gy1] = self.garment_box;
        if gx1 <= gx0 || gy1 <= gy0 || gx1 > self.canvas_w || gy1 > self.canvas_h {
            return Err(Error::invalid(
                "scene_spec",
                format!("garment box {:?} outside {}x{}", self.garment_box, self.canvas_w, self.canvas_h),
            ));
        }
        if self.cell == 0 {
            return Err(Error::invalid("scene_spec", "cell must be positive"));
        }
        if self.glyph >= GLYPHS.len() {
            return Err(Error::invalid("scene_spec", "glyph index out of range"));
        }
        Ok(())
    }

    /// Texture color at garment-local coordinates.
    fn pattern_pixel(&self, u: usize, v: usize) -> [u8; 3] {
        match self.pattern {
            Pattern::Solid => self.color_a,
            Pattern::Stripes => {
                if (v / self.cell) % 2 == 0 {
                    self.color_a
                } else {
                    self.color_b
                }
            }
            Pattern::Checker => {
                if (u / self.cell + v / self.cell) % 2 == 0 {
                    self.color_a
                } else {
                    self.color_b
                }
            }
            Pattern::LogoGlyph => {
                let [gx0, gy0, gx1, gy1] = self.garment_box;
                let (bw, bh) = (gx1 - gx0, gy1 - gy0);
                // glyph occupies the middle ~3/5 of the box
                let (gw, gh) = (bw * 3 / 5, bh * 3 / 5);
                let (ox, oy) = ((bw - gw) / 2, (bh - gh) / 2);
                if gw >= 5 && gh >= 7 && u >= ox && u < ox + gw && v >= oy && v < oy + gh {
                    let col = (u - ox) * 5 / gw;
                    let row = (v - oy) * 7 / gh;
                    if (GLYPHS[self.glyph][row] >> (4 - col)) & 1 == 1 {
                        return self.color_b;
                    }
                }
                self.color_a
            }
        }
    }

    // -- flat text serialization (key=value, one per line) --

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = |v: &[u8; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "canvas_h={}", self.canvas_h);
        let _ = writeln!(out, "canvas_w={}", self.canvas_w);
        let _ = writeln!(out, "bg_top={}", c(&self.bg_top));
        let _ = writeln!(out, "bg_bottom={}", c(&self.bg_bottom));
        let _ = writeln!(out, "skin={}", c(&self.skin));
        let _ = writeln!(out, "head={},{},{}", self.head_cx, self.head_cy, self.head_r);
        let _ = writeln!(
            out,
            "torso={},{},{},{}",
            self.torso[0], self.torso[1], self.torso[2], self.torso[3]
        );
        let _ = writeln!(out, "pattern={}", self.pattern.name());
        let _ = writeln!(out, "color_a={}", c(&self.color_a));
        let _ = writeln!(out, "color_b={}", c(&self.color_b));
        let _ = writeln!(out, "cell={}", self.cell);
        let _ = writeln!(out, "glyph={}", self.glyph);
        let _ = writeln!(
            out,
            "garment_box={},{},{},{}",
            self.garment_box[0], self.garment_box[1], self.garment_box[2], self.garment_box[3]
        );
        out
    }

    pub fn from_text(text: &str) -> Result<SceneSpec> {
        let mut map = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("scene spec line {}: missing '='", i + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k).ok_or_else(|| Error::Config(format!("scene spec misses key {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("bad integer for {k:?}")))
        };
        let nums = |k: &str, n: usize| -> Result<Vec<usize>> {
            let v: Vec<usize> = get(k)?
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad list for {k:?}")))?;
            if v.len() != n {
                return Err(Error::Config(format!("{k:?} needs {n} values")));
            }
            Ok(v)
        };
        let color = |k: &str| -> Result<[u8; 3]> {
            let v = nums(k, 3)?;
            if v.iter().any(|&x| x > 255) {
                return Err(Error::Config(format!("{k:?} channel out of range")));
            }
            Ok([v[0] as u8, v[1] as u8, v[2] as u8])
        };
        let head = nums("head", 3)?;
        let torso = nums("torso", 4)?;
        let gbox = nums("garment_box", 4)?;
        let spec = SceneSpec {
            seed: get("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?,
            canvas_h: num("canvas_h")?,
            canvas_w: num("canvas_w")?,
            bg_top: color("bg_top")?,
            bg_bottom: color("bg_bottom")?,
            skin: color("skin")?,
            head_cx: head[0],
            head_cy: head[1],
            head_r: head[2],
            torso: [torso[0], torso[1], torso[2], torso[3]],
            pattern: Pattern::parse(get("pattern")?)?,
            color_a: color("color_a")?,
            color_b: color("color_b")?,
            cell: num("cell")?,
            glyph: num("glyph")?,
            garment_box: [gbox[0], gbox[1], gbox[2], gbox[3]],
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One dataset record: ground truth, in-shop garment, inpaint mask, spec.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub person: RgbImage,
    pub garment: RgbImage,
    pub mask: BitMask,
    pub spec: SceneSpec,
}

fn lerp_color(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    [mix(a[0], b[0]), mix(a[1], b[1]), mix(a[2], b[2])]
}

/// Render the pair described by `spec`. The worn and in-shop garments share
/// the same texture modulo placement, and the mask is exactly the garment
/// support.
pub fn gen_sample(spec: &SceneSpec) -> Result<SamplePair> {
    spec.validate()?;
    let (h, w) = (spec.canvas_h, spec.canvas_w);

    let mut person = RgbImage::new(w, h);
    for y in 0..h {
        let t = if h > 1 { y as f64 / (h - 1) as f64 } else { 0.0 };
        let bg = lerp_color(spec.bg_top, spec.bg_bottom, t);
        for x in 0..w {
            person.put(x, y, bg);
        }
    }
    // torso then head
    let [tx0, ty0, tx1, ty1] = spec.torso;
    for y in ty0..ty1.min(h) {
        for x in tx0..tx1.min(w) {
            person.put(x, y, spec.skin);
        }
    }
    let r2 = (spec.head_r * spec.head_r) as isize;
    for y in spec.head_cy.saturating_sub(spec.head_r)..(spec.head_cy + spec.head_r + 1).min(h) {
        for x in spec.head_cx.saturating_sub(spec.head_r)..(spec.head_cx + spec.head_r + 1).min(w) {
            let dx = x as isize - spec.head_cx as isize;
            let dy = y as isize - spec.head_cy as isize;
            if dx * dx + dy * dy <= r2 {
                person.put(x, y, spec.skin);
            }
        }
    }
    // worn garment + mask
    let [gx0, gy0, gx1, gy1] = spec.garment_box;
    let mut mask = BitMask::new(w, h);
    for y in gy0..gy1 {
        for x in gx0..gx1 {
            person.put(x, y, spec.pattern_pixel(x - gx0, y - gy0));
            mask.set(x, y, true);
        }
    }
    // in-shop garment: same texture, centered on white
    let (bw, bh) = (gx1 - gx0, gy1 - gy0);
    let (ox, oy) = ((w - bw) / 2, (h - bh) / 2);
    let mut garment = RgbImage::new(w, h);
    garment.data.fill(255);
    for v in 0..bh {
        for u in 0..bw {
            garment.put(ox + u, oy + v, spec.pattern_pixel(u, v));
        }
    }
    Ok(SamplePair { person, garment, mask, spec: spec.clone() })
}

// ── dataset on disk ──────────────────────────────────────────────────

/// One manifest line: id, file paths, scene seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub person: PathBuf,
    pub garment: PathBuf,
    pub mask: PathBuf,
    pub spec: PathBuf,
    pub seed: u64,
}

/// Paths for the three manifest files of a generated dataset.
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub root: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
    pub test_unpaired: PathBuf,
}

fn sample_paths(dir: &Path, id: usize) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{id:05}_person.ppm")),
        dir.join(format!("{id:05}_garment.ppm")),
        dir.join(format!("{id:05}_mask.pbm")),
        dir.join(format!("{id:05}_spec.txt")),
    )
}

pub fn save_sample(dir: &Path, id: usize, pair: &SamplePair) -> Result<ManifestEntry> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let (p, g, m, s) = sample_paths(dir, id);
    image_io::write_ppm(&p, &pair.person)?;
    image_io::write_ppm(&g, &pair.garment)?;
    image_io::write_pbm(&m, &pair.mask)?;
    fs::write(&s, pair.spec.to_text()).map_err(|e| Error::io(s.display().to_string(), e))?;
    Ok(ManifestEntry { id, person: p, garment: g, mask: m, spec: s, seed: pair.spec.seed })
}

pub fn load_sample(entry: &ManifestEntry) -> Result<SamplePair> {
    let person = image_io::read_ppm(&entry.person)?;
    let garment = image_io::read_ppm(&entry.garment)?;
    let mask = image_io::read_pbm(&entry.mask)?;
    let text = fs::read_to_string(&entry.spec)
        .map_err(|e| Error::io(entry.spec.display().to_string(), e))?;
    let spec = SceneSpec::from_text(&text)?;
    Ok(SamplePair { person, garment, mask, spec })
}

fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            e.id,
            e.person.display(),
            e.garment.display(),
            e.mask.display(),
            e.spec.display(),
            e.seed
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 6 {
            return Err(Error::Config(format!(
                "manifest {} line {}: expected 6 tab-separated fields",
                path.display(),
                i + 1
            )));
        }
        entries.push(ManifestEntry {
            id: parts[0].parse().map_err(|_| Error::Config("bad manifest id".into()))?,
            person: PathBuf::from(parts[1]),
            garment: PathBuf::from(parts[2]),
            mask: PathBuf::from(parts[3]),
            spec: PathBuf::from(parts[4]),
            seed: parts[5].parse().map_err(|_| Error::Config("bad manifest seed".into()))?,
        });
    }
    Ok(entries)
}

/// Generate `n` samples under `out`, split into train/test manifests plus an
/// unpaired test view that assigns each test person the next test sample's
/// garment (a derangement: nobody keeps their own garment).
pub fn gen_dataset(
    seed: u64,
    n: usize,
    split_ratio: f64,
    canvas_h: usize,
    canvas_w: usize,
    out: &Path,
) -> Result<DatasetPaths> {
    if n < 2 {
        return Err(Error::invalid("gen_dataset", "need at least 2 samples"));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::invalid("gen_dataset", "split ratio must be in [0,1]"));
    }
    let samples_dir = out.join("samples");
    let mut entries = Vec::with_capacity(n);
    for id in 0..n {
        let scene_seed = seed.wrapping_add(id as u64);
        let spec = SceneSpec::random(scene_seed, canvas_h, canvas_w)?;
        let pair = gen_sample(&spec)?;
        entries.push(save_sample(&samples_dir, id, &pair)?);
    }
    let n_train = ((n as f64) * split_ratio).floor() as usize;
    let (train, test) = entries.split_at(n_train.min(n));

    let unpaired: Vec<ManifestEntry> = (0..test.len())
        .map(|i| {
            let donor = &test[(i + 1) % test.len()];
            ManifestEntry {
                garment: donor.garment.clone(),
                ..test[i].clone()
            }
        })
        .collect();

    let paths = DatasetPaths {
        root: out.to_path_buf(),
        train: out.join("train.manifest"),
        test: out.join("test.manifest"),
        test_unpaired: out.join("test_unpaired.manifest"),
    };
    write_manifest(&paths.train, train)?;
    write_manifest(&paths.test, test)?;
    write_manifest(&paths.test_unpaired, &unpaired)?;
    Ok(paths)
}
