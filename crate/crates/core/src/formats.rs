//! On-disk formats shared by several stages.
//!
//! Binary files are little-endian throughout:
//!
//! * `AVLS` layer stack: magic, `u32` L, T, D, then L*T*D `f32` row-major.
//! * `AVFM` feature matrix: magic, `u32` n, F, then n*F `f32`. Rows align with
//!   the companion manifest.
//!
//! The checkpoint (`AVHD`) and model (`AVEM`) formats live next to the types
//! they persist.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{AvError, Result};
use crate::types::{parse_label, AvPoint, Dataset, EmotionFeature, LayerStack, Row};

pub const LAYER_STACK_MAGIC: &[u8; 4] = b"AVLS";
pub const FEATURE_MATRIX_MAGIC: &[u8; 4] = b"AVFM";

pub const MANIFEST_HEADER: [&str; 5] = ["utterance_id", "label", "speaker", "split", "feature_path"];
pub const AV_CSV_HEADER: [&str; 4] = ["utterance_id", "valence", "arousal", "label"];

/// Cursor over a byte buffer with little-endian primitive reads.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(AvError::format(self.path, "unexpected end of file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(AvError::format(
                self.path,
                format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes after payload"));
        }
        Ok(())
    }

    pub(crate) fn err(&self, msg: &str) -> AvError {
        AvError::format(self.path, msg)
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| AvError::input(format!("{what} = {v} does not fit in u32")))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AvError::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| AvError::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| AvError::io(path, e))
}

/// Writes `json` prefixed by its `u32` byte length.
pub(crate) fn put_json_header(out: &mut Vec<u8>, json: &str) -> Result<()> {
    put_u32(out, to_u32(json.len(), "header length")?);
    out.extend_from_slice(json.as_bytes());
    Ok(())
}

pub(crate) fn json_header<T: serde::de::DeserializeOwned>(r: &mut ByteReader<'_>) -> Result<T> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    serde_json::from_slice(bytes).map_err(|e| r.err(&format!("bad header: {e}")))
}

pub fn encode_layer_stack(stack: &LayerStack) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + stack.data().len() * 4);
    out.extend_from_slice(LAYER_STACK_MAGIC);
    put_u32(&mut out, to_u32(stack.layers(), "layers")?);
    put_u32(&mut out, to_u32(stack.frames(), "frames")?);
    put_u32(&mut out, to_u32(stack.dims(), "dims")?);
    for &v in stack.data() {
        put_f32(&mut out, v);
    }
    Ok(out)
}

pub fn write_layer_stack(path: impl AsRef<Path>, stack: &LayerStack) -> Result<()> {
    write_file(path.as_ref(), &encode_layer_stack(stack)?)
}

pub fn read_layer_stack(path: impl AsRef<Path>, utterance_id: &str) -> Result<LayerStack> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(LAYER_STACK_MAGIC)?;
    let (l, t, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = l
        .checked_mul(t)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| r.err("shape overflow"))?;
    let data = r.f32_vec(n)?;
    r.finish()?;
    LayerStack::new(utterance_id, l, t, d, data)
}

pub fn encode_feature_matrix(features: &[EmotionFeature]) -> Result<Vec<u8>> {
    let dim = check_feature_dims(features)?;
    let mut out = Vec::with_capacity(12 + features.len() * dim * 4);
    out.extend_from_slice(FEATURE_MATRIX_MAGIC);
    put_u32(&mut out, to_u32(features.len(), "rows")?);
    put_u32(&mut out, to_u32(dim, "feature dim")?);
    for f in features {
        for &v in &f.vector {
            put_f32(&mut out, v as f32);
        }
    }
    Ok(out)
}

pub fn write_feature_matrix(path: impl AsRef<Path>, features: &[EmotionFeature]) -> Result<()> {
    write_file(path.as_ref(), &encode_feature_matrix(features)?)
}

/// Reads a raw AVFM matrix as `n` rows of length `F`.
pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(FEATURE_MATRIX_MAGIC)?;
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim == 0 && n > 0 {
        return Err(r.err("zero feature dimension"));
    }
    let data = r.f32_vec(n.checked_mul(dim).ok_or_else(|| r.err("shape overflow"))?)?;
    r.finish()?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(r.err("non-finite feature value"));
    }
    Ok(data
        .chunks(dim.max(1))
        .take(n)
        .map(|c| c.iter().map(|&v| v as f64).collect())
        .collect())
}

fn check_feature_dims(features: &[EmotionFeature]) -> Result<usize> {
    let dim = features.first().map_or(0, |f| f.vector.len());
    for f in features {
        if f.vector.len() != dim {
            return Err(AvError::shape(format!(
                "feature `{}` has dimension {}, expected {dim}",
                f.utterance_id,
                f.vector.len()
            )));
        }
        if f.vector.iter().any(|v| !v.is_finite()) {
            return Err(AvError::numerical(format!(
                "feature `{}` has non-finite entries",
                f.utterance_id
            )));
        }
    }
    Ok(dim)
}

/// Writes features as CSV with header `utterance_id,f0,..,f{F-1}`.
pub fn write_feature_csv(path: impl AsRef<Path>, features: &[EmotionFeature]) -> Result<()> {
    let dim = check_feature_dims(features)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["utterance_id".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for f in features {
        let mut rec = vec![f.utterance_id.clone()];
        rec.extend(f.vector.iter().map(|v| format!("{}", *v as f32)));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| AvError::input(e.to_string()))?;
    write_file(path.as_ref(), &bytes)
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Vec<EmotionFeature>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("utterance_id") {
        return Err(AvError::format(path, "first column must be utterance_id"));
    }
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("f{i}") {
            return Err(AvError::format(path, format!("unexpected column `{name}`")));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().to_string();
        let vector = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f32>()
                    .map(f64::from)
                    .map_err(|_| AvError::format(path, format!("bad number `{s}` for `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(EmotionFeature {
            utterance_id: id,
            vector,
        });
    }
    check_feature_dims(&out)?;
    Ok(out)
}

/// Loads features for `rows`. CSV files are matched by id; AVFM files must be
/// row-aligned with the manifest.
pub fn read_features_for_rows(path: impl AsRef<Path>, rows: &[Row]) -> Result<Vec<EmotionFeature>> {
    let path = path.as_ref();
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let all = read_feature_csv(path)?;
        let mut by_id = std::collections::HashMap::new();
        for f in all {
            let id = f.utterance_id.clone();
            if by_id.insert(id.clone(), f).is_some() {
                return Err(AvError::DuplicateId(id));
            }
        }
        rows.iter()
            .map(|r| {
                by_id.remove(&r.utterance_id).ok_or_else(|| {
                    AvError::input(format!("no features for `{}` in {}", r.utterance_id, path.display()))
                })
            })
            .collect()
    } else {
        let matrix = read_feature_matrix(path)?;
        if matrix.len() != rows.len() {
            return Err(AvError::input(format!(
                "{} has {} rows but the manifest has {}",
                path.display(),
                matrix.len(),
                rows.len()
            )));
        }
        Ok(rows
            .iter()
            .zip(matrix)
            .map(|(r, vector)| EmotionFeature {
                utterance_id: r.utterance_id.clone(),
                vector,
            })
            .collect())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Row>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(AvError::format(
            path,
            format!("manifest header must be `{}`", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default().trim();
        let id = field(0);
        if id.is_empty() {
            return Err(AvError::format(path, "empty utterance_id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(AvError::DuplicateId(id.to_string()));
        }
        let speaker = Some(field(2)).filter(|s| !s.is_empty()).map(String::from);
        let feature_path = Some(field(4)).filter(|s| !s.is_empty()).map(|p| resolve(&base, p));
        rows.push(Row {
            utterance_id: id.to_string(),
            label: parse_label(field(1)),
            speaker,
            split: field(3).parse()?,
            feature_path,
        });
    }
    Ok(rows)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes a manifest. Feature paths are written relative to `base` when
/// they lie inside it.
pub fn write_manifest(path: impl AsRef<Path>, rows: &[Row]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for r in rows {
        let fp = r
            .feature_path
            .as_ref()
            .map(|p| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned())
            .unwrap_or_default();
        let split = r.split.to_string();
        w.write_record([
            r.utterance_id.as_str(),
            r.label.as_deref().unwrap_or(""),
            r.speaker.as_deref().unwrap_or(""),
            split.as_str(),
            fp.as_str(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| AvError::input(e.to_string()))?;
    write_file(path, &bytes)
}

/// Loads a manifest together with the layer stack of every row.
pub fn load_stack_dataset(manifest: impl AsRef<Path>) -> Result<Dataset<LayerStack>> {
    let rows = read_manifest(manifest)?;
    let mut ds = Dataset::new();
    for row in rows {
        let stack = match &row.feature_path {
            Some(p) => read_layer_stack(p, &row.utterance_id)?,
            None => {
                return Err(AvError::input(format!(
                    "row `{}` has no feature_path",
                    row.utterance_id
                )))
            }
        };
        ds.insert(row, stack)?;
    }
    Ok(ds)
}

/// One line of an AV prediction or reference CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct AvRecord {
    pub utterance_id: String,
    pub valence: f64,
    pub arousal: f64,
    pub label: Option<String>,
}

impl AvRecord {
    pub fn from_point(p: &AvPoint, label: Option<&str>) -> Self {
        AvRecord {
            utterance_id: p.utterance_id.clone(),
            valence: p.valence,
            arousal: p.arousal,
            label: label.map(String::from),
        }
    }
}

pub fn encode_av_csv(records: &[AvRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(AV_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.utterance_id.clone(),
            format!("{}", r.valence),
            format!("{}", r.arousal),
            r.label.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| AvError::input(e.to_string()))
}

pub fn write_av_csv(path: impl AsRef<Path>, records: &[AvRecord]) -> Result<()> {
    write_file(path.as_ref(), &encode_av_csv(records)?)
}

pub fn parse_av_csv(text: &str, origin: &Path) -> Result<Vec<AvRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    // The label column is optional for reference files.
    if cols.len() < 3 || cols[..3] != AV_CSV_HEADER[..3] || (cols.len() == 4 && cols[3] != "label") || cols.len() > 4 {
        return Err(AvError::format(
            origin,
            format!("AV CSV header must be `{}`", AV_CSV_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or_default().trim().to_string();
        let num = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or_default().trim();
            let v: f64 = s
                .parse()
                .map_err(|_| AvError::format(origin, format!("bad number `{s}` for `{id}`")))?;
            if !v.is_finite() {
                return Err(AvError::format(origin, format!("non-finite value for `{id}`")));
            }
            Ok(v)
        };
        out.push(AvRecord {
            utterance_id: id.clone(),
            valence: num(1)?,
            arousal: num(2)?,
            label: rec.get(3).and_then(parse_label),
        });
    }
    Ok(out)
}

pub fn read_av_csv(path: impl AsRef<Path>) -> Result<Vec<AvRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AvError::io(path, e))?;
    parse_av_csv(&text, path)
}

/// Writes any serializable value as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(value)?;
    s.write_all(b"\n").expect("vec write");
    write_file(path.as_ref(), &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Split;

    #[test]
    fn layer_stack_bytes_layout() {
        let s = LayerStack::new("u", 1, 2, 1, vec![1.0, -2.0]).unwrap();
        let b = encode_layer_stack(&s).unwrap();
        assert_eq!(&b[..4], b"AVLS");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn truncated_stack_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.avls");
        let s = LayerStack::new("u", 1, 2, 1, vec![1.0, -2.0]).unwrap();
        let mut b = encode_layer_stack(&s).unwrap();
        b.pop();
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(read_layer_stack(&p, "u"), Err(AvError::Format { .. })));
        std::fs::write(&p, b"XXXX").unwrap();
        assert!(matches!(read_layer_stack(&p, "u"), Err(AvError::Format { .. })));
    }

    #[test]
    fn manifest_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(
            &p,
            "utterance_id,label,speaker,split,feature_path\na,Happy,s1,train,a.avls\nb,xxx,,test,\n",
        )
        .unwrap();
        let rows = read_manifest(&p).unwrap();
        assert_eq!(rows[0].label.as_deref(), Some("happy"));
        assert_eq!(rows[0].feature_path, Some(dir.path().join("a.avls")));
        assert_eq!(rows[1].label, None);
        assert_eq!(rows[1].split, Split::Test);
        let p2 = dir.path().join("m2.csv");
        write_manifest(&p2, &rows).unwrap();
        assert_eq!(read_manifest(&p2).unwrap(), rows);

        std::fs::write(&p, "id,label\na,happy\n").unwrap();
        assert!(read_manifest(&p).is_err());
        std::fs::write(
            &p,
            "utterance_id,label,speaker,split,feature_path\na,happy,,train,\na,sad,,train,\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&p), Err(AvError::DuplicateId(_))));
    }

    #[test]
    fn feature_csv_alternative() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let feats = vec![
            EmotionFeature {
                utterance_id: "a".into(),
                vector: vec![0.5, -1.0],
            },
            EmotionFeature {
                utterance_id: "b".into(),
                vector: vec![2.0, 0.25],
            },
        ];
        write_feature_csv(&p, &feats).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("utterance_id,f0,f1\n"));
        let rows: Vec<Row> = ["b", "a"]
            .iter()
            .map(|id| Row {
                utterance_id: id.to_string(),
                label: None,
                speaker: None,
                split: Split::Train,
                feature_path: None,
            })
            .collect();
        let back = read_features_for_rows(&p, &rows).unwrap();
        assert_eq!(back[0], feats[1]);
        assert_eq!(back[1], feats[0]);
    }

    #[test]
    fn av_csv_label_column_optional() {
        let recs = parse_av_csv("utterance_id,valence,arousal\nx,0.5,-0.25\n", Path::new("r")).unwrap();
        assert_eq!(recs[0].label, None);
        assert_eq!(recs[0].arousal, -0.25);
        let bytes = encode_av_csv(&recs).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            "utterance_id,valence,arousal,label\nx,0.5,-0.25,\n"
        );
        assert!(parse_av_csv("id,v,a\n", Path::new("r")).is_err());
    }
}
