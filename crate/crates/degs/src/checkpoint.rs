//! The "DEGS" checkpoint container and its lossless text twin.
//!
//! Both encodings walk the same field sequence, so the text form is a
//! line-per-field transcript of the binary one. Layout details live in
//! `docs/formats.md`.

use std::fmt::Write as _;
use std::path::Path;

use degs_core::field::{DeformationField, EncoderConfig, FieldLayout, Mlp, TriPlaneHashEncoder};
use degs_core::optim::{Adam, AdamConfig, CloudLearningRates, CloudOptimizer, FieldOptimizer};
use degs_core::scene::ColorModel;
use degs_core::train::{BranchState, Stage, TrainState};
use degs_core::{Bounds, Branch, GaussianPrimitive, PrimitiveCloud};

use crate::error::{DegsError, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"DEGS";
pub const VERSION: u32 = 1;
const TEXT_HEADER: &str = "DEGS-TEXT";

const SECTIONS: [(&[u8; 4], Branch, Part); 6] = [
    (b"FCLD", Branch::Face, Part::Cloud),
    (b"FFLD", Branch::Face, Part::Field),
    (b"FOPT", Branch::Face, Part::Optimizer),
    (b"MCLD", Branch::Mouth, Part::Cloud),
    (b"MFLD", Branch::Mouth, Part::Field),
    (b"MOPT", Branch::Mouth, Part::Optimizer),
];
const END: &[u8; 4] = b"END\0";

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Cloud,
    Field,
    Optimizer,
}

/// Serialization target: raw little-endian bytes or `key = values` lines.
enum Out {
    Bin(Vec<u8>),
    Text(String),
}

impl Out {
    fn u32(&mut self, key: &str, v: u32) {
        match self {
            Out::Bin(b) => b.extend_from_slice(&v.to_le_bytes()),
            Out::Text(s) => writeln!(s, "{key} = {v}").unwrap(),
        }
    }

    fn u64(&mut self, key: &str, v: u64) {
        match self {
            Out::Bin(b) => b.extend_from_slice(&v.to_le_bytes()),
            Out::Text(s) => writeln!(s, "{key} = {v}").unwrap(),
        }
    }

    fn f64s(&mut self, key: &str, v: &[f64]) {
        match self {
            Out::Bin(b) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            Out::Text(s) => {
                s.push_str(key);
                s.push_str(" =");
                for x in v {
                    // `{:?}` prints the shortest string that parses back to
                    // the same bits.
                    write!(s, " {x:?}").unwrap();
                }
                s.push('\n');
            }
        }
    }

    fn f64(&mut self, key: &str, v: f64) {
        self.f64s(key, &[v]);
    }

    /// Length-prefixed vector.
    fn vec(&mut self, key: &str, v: &[f64]) {
        self.u64(&format!("{key}.len"), v.len() as u64);
        self.f64s(key, v);
    }

    fn section(&mut self, tag: &[u8; 4], body: impl FnOnce(&mut Out)) {
        match self {
            Out::Bin(b) => {
                let mut inner = Out::Bin(Vec::new());
                body(&mut inner);
                let Out::Bin(payload) = inner else { unreachable!() };
                b.extend_from_slice(tag);
                b.extend_from_slice(&(payload.len() as u64).to_le_bytes());
                b.extend_from_slice(&payload);
            }
            Out::Text(s) => {
                writeln!(s, "[{}]", tag_name(tag)).unwrap();
                body(self);
            }
        }
    }
}

fn tag_name(tag: &[u8; 4]) -> String {
    String::from_utf8_lossy(tag).trim_end_matches('\0').to_string()
}

/// Deserialization source matching [`Out`].
enum In<'a> {
    Bin { bytes: &'a [u8], pos: usize },
    Text { lines: std::iter::Peekable<std::str::Lines<'a>>, line: usize },
}

impl<'a> In<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let In::Bin { bytes, pos } = self else { unreachable!() };
        if bytes.len() - *pos < n {
            return Err(format!("truncated: needed {n} more bytes at offset {pos}, file has {}", bytes.len()));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    }

    fn text_line(&mut self, key: &str) -> std::result::Result<Vec<&'a str>, String> {
        let In::Text { lines, line } = self else { unreachable!() };
        *line += 1;
        let l = lines.next().ok_or_else(|| format!("truncated: expected `{key}` at line {line}"))?;
        let (k, rest) = l.split_once(" =").ok_or_else(|| format!("line {line}: expected `{key} = ...`"))?;
        if k != key {
            return Err(format!("line {line}: expected key `{key}`, found `{k}`"));
        }
        Ok(rest.split_whitespace().collect())
    }

    fn u32(&mut self, key: &str) -> std::result::Result<u32, String> {
        match self {
            In::Bin { .. } => Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap())),
            In::Text { .. } => {
                let v = self.text_line(key)?;
                v.first().and_then(|s| s.parse().ok()).filter(|_| v.len() == 1).ok_or_else(|| format!("`{key}`: expected one u32"))
            }
        }
    }

    fn u64(&mut self, key: &str) -> std::result::Result<u64, String> {
        match self {
            In::Bin { .. } => Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap())),
            In::Text { .. } => {
                let v = self.text_line(key)?;
                v.first().and_then(|s| s.parse().ok()).filter(|_| v.len() == 1).ok_or_else(|| format!("`{key}`: expected one u64"))
            }
        }
    }

    fn f64s(&mut self, key: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
        match self {
            In::Bin { .. } => {
                let bytes = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
                Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            In::Text { .. } => {
                let v = self.text_line(key)?;
                if v.len() != n {
                    return Err(format!("`{key}`: expected {n} values, found {}", v.len()));
                }
                v.iter().map(|s| s.parse::<f64>().map_err(|e| format!("`{key}`: {e}"))).collect()
            }
        }
    }

    fn f64(&mut self, key: &str) -> std::result::Result<f64, String> {
        Ok(self.f64s(key, 1)?[0])
    }

    fn array<const N: usize>(&mut self, key: &str) -> std::result::Result<[f64; N], String> {
        Ok(self.f64s(key, N)?.try_into().unwrap())
    }

    fn vec(&mut self, key: &str) -> std::result::Result<Vec<f64>, String> {
        let n = self.u64(&format!("{key}.len"))? as usize;
        if let In::Bin { bytes, pos } = self {
            if n > (bytes.len() - *pos) / 8 {
                return Err(format!("truncated: `{key}` declares {n} values"));
            }
        }
        self.f64s(key, n)
    }

    fn section<T>(
        &mut self,
        tag: &[u8; 4],
        body: impl FnOnce(&mut In<'a>) -> std::result::Result<T, String>,
    ) -> std::result::Result<T, String> {
        match self {
            In::Bin { .. } => {
                let found: [u8; 4] = self.take(4)?.try_into().unwrap();
                if &found != tag {
                    return Err(format!("expected section {}, found {}", tag_name(tag), tag_name(&found)));
                }
                let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
                let payload = self.take(len)?;
                let mut inner = In::Bin { bytes: payload, pos: 0 };
                let out = body(&mut inner)?;
                let In::Bin { pos, .. } = inner else { unreachable!() };
                if pos != len {
                    return Err(format!("section {} has {} trailing bytes", tag_name(tag), len - pos));
                }
                Ok(out)
            }
            In::Text { lines, line } => {
                *line += 1;
                let want = format!("[{}]", tag_name(tag));
                match lines.next() {
                    Some(l) if l == want => body(self),
                    Some(l) => Err(format!("line {line}: expected {want}, found `{l}`")),
                    None => Err(format!("truncated: expected {want}")),
                }
            }
        }
    }
}

fn write_bounds(o: &mut Out, key: &str, b: &Bounds) {
    o.f64s(&format!("{key}.min"), &b.min);
    o.f64s(&format!("{key}.max"), &b.max);
}

fn read_bounds(i: &mut In, key: &str) -> std::result::Result<Bounds, String> {
    let min = i.array(&format!("{key}.min"))?;
    let max = i.array(&format!("{key}.max"))?;
    Bounds::new(min, max).map_err(|e| e.to_string())
}

fn write_cloud(o: &mut Out, c: &PrimitiveCloud) {
    o.u32("branch", c.branch.as_u8() as u32);
    write_bounds(o, "bounds", &c.bounds);
    o.u64("count", c.len() as u64);
    o.u32("d", c.embedding_dim as u32);
    o.u32("z", c.color_dim() as u32);
    for (k, p) in c.primitives.iter().enumerate() {
        o.f64s(&format!("p{k}.mu"), &p.mu);
        o.f64s(&format!("p{k}.raw_scale"), &p.raw_scale);
        o.f64s(&format!("p{k}.raw_rotation"), &p.raw_rotation);
        o.f64(&format!("p{k}.raw_opacity"), p.raw_opacity);
        o.f64s(&format!("p{k}.color_feature"), &p.color_feature);
        o.f64s(&format!("p{k}.embedding"), &p.embedding);
    }
}

fn read_cloud(i: &mut In) -> std::result::Result<PrimitiveCloud, String> {
    let branch = Branch::from_u8(i.u32("branch")? as u8).ok_or("unknown branch tag")?;
    let bounds = read_bounds(i, "bounds")?;
    let count = i.u64("count")? as usize;
    let d = i.u32("d")? as usize;
    let z = i.u32("z")? as usize;
    let color_model = ColorModel::from_dim(z).map_err(|e| e.to_string())?;
    if let In::Bin { bytes, pos } = i {
        let per = 11 + z + d;
        if count.saturating_mul(per * 8) > bytes.len() - *pos {
            return Err(format!("truncated: {count} primitives declared"));
        }
    }
    let mut cloud = PrimitiveCloud::empty(branch, bounds, d, color_model);
    cloud.primitives.reserve(count);
    for k in 0..count {
        cloud.primitives.push(GaussianPrimitive {
            mu: i.array(&format!("p{k}.mu"))?,
            raw_scale: i.array(&format!("p{k}.raw_scale"))?,
            raw_rotation: i.array(&format!("p{k}.raw_rotation"))?,
            raw_opacity: i.f64(&format!("p{k}.raw_opacity"))?,
            color_feature: i.f64s(&format!("p{k}.color_feature"), z)?,
            embedding: i.f64s(&format!("p{k}.embedding"), d)?,
        });
    }
    Ok(cloud)
}

fn write_field(o: &mut Out, f: &DeformationField) {
    o.u32("layout.embedding_dim", f.layout.embedding_dim as u32);
    o.u32("layout.audio_dim", f.layout.audio_dim as u32);
    o.u32("layout.expression_dim", f.layout.expression_dim as u32);
    let c = &f.encoder.config;
    o.u32("encoder.levels", c.levels as u32);
    o.u32("encoder.table_size", c.table_size as u32);
    o.u32("encoder.features", c.features as u32);
    o.u32("encoder.min_resolution", c.min_resolution as u32);
    o.u32("encoder.max_resolution", c.max_resolution as u32);
    write_bounds(o, "encoder.bounds", &f.encoder.bounds);
    o.vec("encoder.tables", &f.encoder.tables);
    o.u32("mlp.layers", f.mlp.widths.len() as u32);
    for (k, w) in f.mlp.widths.iter().enumerate() {
        o.u32(&format!("mlp.width{k}"), *w as u32);
    }
    o.vec("mlp.params", &f.mlp.params);
}

fn read_field(i: &mut In) -> std::result::Result<DeformationField, String> {
    let layout = FieldLayout {
        embedding_dim: i.u32("layout.embedding_dim")? as usize,
        audio_dim: i.u32("layout.audio_dim")? as usize,
        expression_dim: i.u32("layout.expression_dim")? as usize,
    };
    let config = EncoderConfig {
        levels: i.u32("encoder.levels")? as usize,
        table_size: i.u32("encoder.table_size")? as usize,
        features: i.u32("encoder.features")? as usize,
        min_resolution: i.u32("encoder.min_resolution")? as usize,
        max_resolution: i.u32("encoder.max_resolution")? as usize,
    };
    let bounds = read_bounds(i, "encoder.bounds")?;
    let tables = i.vec("encoder.tables")?;
    let encoder = TriPlaneHashEncoder::with_tables(config, bounds, tables).map_err(|e| e.to_string())?;
    let layers = i.u32("mlp.layers")? as usize;
    if layers > 64 {
        return Err(format!("implausible MLP depth {layers}"));
    }
    let widths = (0..layers).map(|k| i.u32(&format!("mlp.width{k}")).map(|w| w as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let params = i.vec("mlp.params")?;
    let mlp = Mlp::from_params(&widths, params).map_err(|e| e.to_string())?;
    DeformationField::from_parts(layout, encoder, mlp).map_err(|e| e.to_string())
}

fn write_adam(o: &mut Out, key: &str, a: &Adam) {
    let c = &a.config;
    o.f64s(&format!("{key}.config"), &[c.lr, c.beta1, c.beta2, c.eps, c.weight_decay]);
    o.u64(&format!("{key}.step"), a.step);
    o.u64(&format!("{key}.skipped"), a.skipped);
    o.vec(&format!("{key}.m"), &a.m);
    o.vec(&format!("{key}.v"), &a.v);
}

fn read_adam(i: &mut In, key: &str) -> std::result::Result<Adam, String> {
    let [lr, beta1, beta2, eps, weight_decay] = i.array(&format!("{key}.config"))?;
    let step = i.u64(&format!("{key}.step"))?;
    let skipped = i.u64(&format!("{key}.skipped"))?;
    let m = i.vec(&format!("{key}.m"))?;
    let v = i.vec(&format!("{key}.v"))?;
    if m.len() != v.len() {
        return Err(format!("`{key}`: moment lengths differ ({} vs {})", m.len(), v.len()));
    }
    Ok(Adam { config: AdamConfig { lr, beta1, beta2, eps, weight_decay }, m, v, step, skipped })
}

const CLOUD_GROUPS: [&str; 6] = ["mu", "scale", "rotation", "opacity", "color", "embedding"];

fn cloud_groups(o: &CloudOptimizer) -> [&Adam; 6] {
    [&o.mu, &o.scale, &o.rotation, &o.opacity, &o.color, &o.embedding]
}

fn write_optimizer(o: &mut Out, b: &BranchState) {
    let r = &b.cloud_opt.rates;
    o.f64s(
        "cloud.rates",
        &[r.position, r.position_final_ratio, r.scale, r.rotation, r.opacity, r.color, r.embedding, r.embedding_weight_decay],
    );
    o.f64("cloud.spatial_scale", b.cloud_opt.spatial_scale);
    for (name, a) in CLOUD_GROUPS.iter().zip(cloud_groups(&b.cloud_opt)) {
        write_adam(o, &format!("cloud.{name}"), a);
    }
    write_adam(o, "field.tables", &b.field_opt.tables);
    write_adam(o, "field.mlp", &b.field_opt.mlp);
}

fn read_optimizer(i: &mut In) -> std::result::Result<(CloudOptimizer, FieldOptimizer), String> {
    let [position, position_final_ratio, scale, rotation, opacity, color, embedding, embedding_weight_decay] = i.array("cloud.rates")?;
    let rates = CloudLearningRates { position, position_final_ratio, scale, rotation, opacity, color, embedding, embedding_weight_decay };
    let spatial_scale = i.f64("cloud.spatial_scale")?;
    let mut groups = Vec::with_capacity(6);
    for name in CLOUD_GROUPS {
        groups.push(read_adam(i, &format!("cloud.{name}"))?);
    }
    let mut g = groups.into_iter();
    let mut next = || g.next().unwrap();
    let cloud_opt = CloudOptimizer {
        rates,
        spatial_scale,
        mu: next(),
        scale: next(),
        rotation: next(),
        opacity: next(),
        color: next(),
        embedding: next(),
    };
    let field_opt = FieldOptimizer { tables: read_adam(i, "field.tables")?, mlp: read_adam(i, "field.mlp")? };
    Ok((cloud_opt, field_opt))
}

fn check_branch(b: &BranchState, expected: Branch) -> std::result::Result<(), String> {
    let c = &b.cloud;
    if c.branch != expected {
        return Err(format!("{:?} section holds a {:?} cloud", expected, c.branch));
    }
    c.validate().map_err(|e| e.to_string())?;
    let n = c.len();
    let widths = [3, 3, 4, 1, c.color_dim(), c.embedding_dim];
    for ((name, a), w) in CLOUD_GROUPS.iter().zip(cloud_groups(&b.cloud_opt)).zip(widths) {
        if a.len() != n * w {
            return Err(format!("optimizer group {name} has {} entries for {n} primitives of width {w}", a.len()));
        }
    }
    if b.field_opt.tables.len() != b.field.encoder.tables.len() || b.field_opt.mlp.len() != b.field.mlp.params.len() {
        return Err("field optimizer does not match field parameter counts".into());
    }
    if b.field.layout.embedding_dim != c.embedding_dim {
        return Err(format!(
            "field expects embedding dimension {} but the cloud has {}",
            b.field.layout.embedding_dim, c.embedding_dim
        ));
    }
    Ok(())
}

fn encode(state: &TrainState, out: &mut Out) {
    let text = matches!(out, Out::Text(_));
    match out {
        Out::Bin(b) => {
            b.extend_from_slice(MAGIC);
            b.extend_from_slice(&VERSION.to_le_bytes());
        }
        Out::Text(s) => writeln!(s, "{TEXT_HEADER} {VERSION}").unwrap(),
    }
    out.u64("face_count", state.face.cloud.len() as u64);
    out.u64("mouth_count", state.mouth.cloud.len() as u64);
    out.u32("d", state.face.cloud.embedding_dim as u32);
    out.u32("z", state.face.cloud.color_dim() as u32);
    out.u32("completed", state.completed as u32);
    out.u64("seed", state.seed);
    for (tag, branch, part) in SECTIONS {
        let b = match branch {
            Branch::Face => &state.face,
            Branch::Mouth => &state.mouth,
        };
        out.section(tag, |o| match part {
            Part::Cloud => write_cloud(o, &b.cloud),
            Part::Field => write_field(o, &b.field),
            Part::Optimizer => write_optimizer(o, b),
        });
    }
    match out {
        Out::Bin(b) => b.extend_from_slice(END),
        Out::Text(s) => {
            debug_assert!(text);
            s.push_str("[END]\n");
        }
    }
}

/// Header fields readable without decoding the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub face_count: u64,
    pub mouth_count: u64,
    pub embedding_dim: u32,
    pub color_dim: u32,
    pub completed: u8,
    pub seed: u64,
}

fn decode(input: &mut In) -> std::result::Result<TrainState, String> {
    let header = Header {
        version: VERSION,
        face_count: input.u64("face_count")?,
        mouth_count: input.u64("mouth_count")?,
        embedding_dim: input.u32("d")?,
        color_dim: input.u32("z")?,
        completed: u8::try_from(input.u32("completed")?).map_err(|_| "stage bits out of range")?,
        seed: input.u64("seed")?,
    };
    let mut clouds = Vec::new();
    let mut fields = Vec::new();
    let mut opts = Vec::new();
    for (tag, _, part) in SECTIONS {
        match part {
            Part::Cloud => clouds.push(input.section(tag, read_cloud)?),
            Part::Field => fields.push(input.section(tag, read_field)?),
            Part::Optimizer => opts.push(input.section(tag, read_optimizer)?),
        }
    }
    let mut branches = Vec::new();
    for ((cloud, field), (cloud_opt, field_opt)) in clouds.into_iter().zip(fields).zip(opts) {
        branches.push(BranchState { cloud, field, cloud_opt, field_opt });
    }
    let mouth = branches.pop().unwrap();
    let face = branches.pop().unwrap();
    check_branch(&face, Branch::Face)?;
    check_branch(&mouth, Branch::Mouth)?;
    let counts = (face.cloud.len() as u64, mouth.cloud.len() as u64);
    if counts != (header.face_count, header.mouth_count) {
        return Err(format!("header counts {:?} disagree with sections {:?}", (header.face_count, header.mouth_count), counts));
    }
    for b in [&face, &mouth] {
        if b.cloud.embedding_dim as u32 != header.embedding_dim || b.cloud.color_dim() as u32 != header.color_dim {
            return Err("header d / Z disagree with a cloud section".into());
        }
    }
    Ok(TrainState { face, mouth, completed: header.completed, seed: header.seed })
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Out::Bin(Vec::new());
    encode(state, &mut out);
    let Out::Bin(b) = out else { unreachable!() };
    b
}

fn check_version(path: &Path, bytes: &[u8]) -> Result<()> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(DegsError::format(path, "not a DEGS checkpoint (bad magic)"));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != VERSION {
        return Err(DegsError::Version { found, supported: VERSION });
    }
    Ok(())
}

/// Decodes a binary checkpoint. Nothing is returned unless the whole file,
/// including the end marker, parses.
pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<TrainState> {
    check_version(path, bytes)?;
    let mut input = In::Bin { bytes, pos: 8 };
    let state = decode(&mut input).map_err(|m| DegsError::format(path, m))?;
    let rest = match input {
        In::Bin { bytes, pos } => &bytes[pos..],
        In::Text { .. } => unreachable!(),
    };
    if rest != END {
        return Err(DegsError::format(path, "missing or malformed end marker"));
    }
    Ok(state)
}

pub fn read_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    check_version(path, bytes)?;
    let mut input = In::Bin { bytes, pos: 8 };
    let go = |i: &mut In| -> std::result::Result<Header, String> {
        Ok(Header {
            version: VERSION,
            face_count: i.u64("face_count")?,
            mouth_count: i.u64("mouth_count")?,
            embedding_dim: i.u32("d")?,
            color_dim: i.u32("z")?,
            completed: i.u32("completed")? as u8,
            seed: i.u64("seed")?,
        })
    };
    go(&mut input).map_err(|m| DegsError::format(path, m))
}

/// Atomically writes `state` to `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| DegsError::io(path, e))?;
    from_bytes(path, &bytes)
}

/// Lossless text rendering of a checkpoint, one field per line.
pub fn to_text(state: &TrainState) -> String {
    let mut out = Out::Text(String::new());
    encode(state, &mut out);
    let Out::Text(s) = out else { unreachable!() };
    s
}

pub fn from_text(text: &str) -> Result<TrainState> {
    let bad = |m: String| DegsError::format("<text>", m);
    let mut lines = text.lines().peekable();
    let head = lines.next().unwrap_or_default();
    let version = head
        .strip_prefix(TEXT_HEADER)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad("missing DEGS-TEXT header".into()))?;
    if version != VERSION {
        return Err(DegsError::Version { found: version, supported: VERSION });
    }
    let mut input = In::Text { lines, line: 1 };
    let state = decode(&mut input).map_err(bad)?;
    let In::Text { mut lines, .. } = input else { unreachable!() };
    if lines.next() != Some("[END]") || lines.next().is_some() {
        return Err(bad("missing [END] marker or trailing content".into()));
    }
    Ok(state)
}

/// Fails with a dimension-mismatch error naming both values when the
/// checkpoint's embedding width differs from the configured one.
pub fn ensure_embedding_dim(state: &TrainState, configured: usize) -> Result<()> {
    let found = state.face.cloud.embedding_dim;
    if found != configured {
        return Err(degs_core::Error::DimensionMismatch { what: "embedding dimension d", expected: configured, actual: found }.into());
    }
    Ok(())
}

/// Human-readable summary that surfaces every shape and version field.
pub fn describe(state: &TrainState) -> String {
    let mut s = String::new();
    writeln!(s, "format = DEGS").unwrap();
    writeln!(s, "version = {VERSION}").unwrap();
    writeln!(s, "seed = {}", state.seed).unwrap();
    let done: Vec<&str> = Stage::ALL.iter().filter(|st| state.has_completed(**st)).map(|st| st.name()).collect();
    writeln!(s, "completed_stages = {}", if done.is_empty() { "none".to_string() } else { done.join(",") }).unwrap();
    for (name, b) in [("face", &state.face), ("mouth", &state.mouth)] {
        let c = &b.cloud;
        let f = &b.field;
        let e = &f.encoder.config;
        writeln!(s, "{name}.splats = {}", c.len()).unwrap();
        writeln!(s, "{name}.embedding_dim = {}", c.embedding_dim).unwrap();
        writeln!(s, "{name}.color_dim = {}", c.color_dim()).unwrap();
        writeln!(s, "{name}.bounds = {:?} {:?}", c.bounds.min, c.bounds.max).unwrap();
        writeln!(s, "{name}.field.layout = embedding {} audio {} expression {}", f.layout.embedding_dim, f.layout.audio_dim, f.layout.expression_dim).unwrap();
        writeln!(
            s,
            "{name}.field.encoder = levels {} table_size {} features {} resolution {}..{}",
            e.levels, e.table_size, e.features, e.min_resolution, e.max_resolution
        )
        .unwrap();
        writeln!(s, "{name}.field.mlp_widths = {:?}", f.mlp.widths).unwrap();
        writeln!(s, "{name}.optimizer.cloud_steps = {}", b.cloud_opt.mu.step).unwrap();
        writeln!(s, "{name}.optimizer.field_steps = {}", b.field_opt.mlp.step).unwrap();
        writeln!(s, "{name}.optimizer.skipped = {}", b.cloud_opt.skipped() + b.field_opt.skipped()).unwrap();
    }
    s
}
