//! Manifest ingestion, clip loading, split construction and the ALRAD
//! channel-replication transform.

mod sim;

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Label;

pub use sim::{simulate_dataset, simulate_pair, NoiseConfig, ReplayChain, RoomConfig, SimConfig};

pub const MANIFEST_HEADER: [&str; 7] = [
    "path",
    "label",
    "mic_id",
    "env",
    "split",
    "n_channels",
    "sample_rate",
];

/// Recording device. `Synthetic` tags simulator output, which may use any
/// channel count and rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MicId {
    D1,
    D2,
    D3,
    D4,
    #[serde(rename = "SIM")]
    Synthetic,
}

impl MicId {
    /// `(channels, sample rate)` for the ReMASC arrays.
    pub fn layout(self) -> Option<(usize, u32)> {
        match self {
            MicId::D1 => Some((2, 44_100)),
            MicId::D2 => Some((4, 44_100)),
            MicId::D3 => Some((6, 44_100)),
            MicId::D4 => Some((7, 16_000)),
            MicId::Synthetic => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MicId::D1 => "D1",
            MicId::D2 => "D2",
            MicId::D3 => "D3",
            MicId::D4 => "D4",
            MicId::Synthetic => "SIM",
        }
    }
}

impl fmt::Display for MicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MicId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "D1" => Ok(MicId::D1),
            "D2" => Ok(MicId::D2),
            "D3" => Ok(MicId::D3),
            "D4" => Ok(MicId::D4),
            "SIM" => Ok(MicId::Synthetic),
            _ => Err(Error::Config(format!(
                "mic_id must be one of D1..D4 or SIM, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Env {
    A,
    B,
    C,
    D,
}

impl fmt::Display for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Env {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Env::A),
            "B" => Ok(Env::B),
            "C" => Ok(Env::C),
            "D" => Ok(Env::D),
            _ => Err(Error::Config(format!("env must be one of A..D, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!(
                "split must be train or test, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClipRecord {
    pub path: PathBuf,
    pub label: Label,
    pub mic_id: MicId,
    pub env: Env,
    pub split: Split,
    pub n_channels: usize,
    pub sample_rate: u32,
}

impl ClipRecord {
    /// Checks the channel count and sample rate against the device.
    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::Config("n_channels must be at least 1".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if let Some((ch, sr)) = self.mic_id.layout() {
            if self.n_channels != ch {
                return Err(Error::Config(format!(
                    "n_channels must be {ch} for {}, got {}",
                    self.mic_id, self.n_channels
                )));
            }
            if self.sample_rate != sr {
                return Err(Error::Config(format!(
                    "sample_rate must be {sr} for {}, got {}",
                    self.mic_id, self.sample_rate
                )));
            }
        }
        Ok(())
    }
}

/// Reads a manifest CSV. Relative clip paths are resolved against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let err = |line: u64, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let header = reader.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(err(
            1,
            format!("header must be `{}`", MANIFEST_HEADER.join(",")),
        ));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let named = |i: usize, e: Error| {
            err(
                line,
                format!("field {}: {}", MANIFEST_HEADER[i], strip_prefix(&e)),
            )
        };
        let raw_path = field(0);
        if raw_path.is_empty() {
            return Err(err(line, "field path: empty".into()));
        }
        let clip_path = PathBuf::from(raw_path);
        let clip_path = if clip_path.is_relative() {
            base.join(clip_path)
        } else {
            clip_path
        };
        let record = ClipRecord {
            path: clip_path,
            label: field(1).parse().map_err(|e| named(1, e))?,
            mic_id: field(2).parse().map_err(|e| named(2, e))?,
            env: field(3).parse().map_err(|e| named(3, e))?,
            split: field(4).parse().map_err(|e| named(4, e))?,
            n_channels: field(5)
                .parse()
                .map_err(|e| err(line, format!("field n_channels: {e}")))?,
            sample_rate: field(6)
                .parse()
                .map_err(|e| err(line, format!("field sample_rate: {e}")))?,
        };
        record.validate().map_err(|e| {
            let field = if e.to_string().contains("sample_rate") {
                "sample_rate"
            } else {
                "n_channels"
            };
            err(line, format!("field {field}: {}", strip_prefix(&e)))
        })?;
        if !seen.insert(record.path.clone()) {
            return Err(err(
                line,
                format!("duplicate path {}", record.path.display()),
            ));
        }
        out.push(record);
    }
    Ok(out)
}

fn strip_prefix(e: &Error) -> String {
    let s = e.to_string();
    s.strip_prefix("invalid configuration: ")
        .map(str::to_owned)
        .unwrap_or(s)
}

/// Writes records in manifest order; paths are written as stored.
pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in records {
        let p = r
            .path
            .to_str()
            .ok_or_else(|| Error::Data(format!("non UTF-8 path {}", r.path.display())))?;
        w.write_record([
            p,
            r.label.as_str(),
            r.mic_id.as_str(),
            &r.env.to_string(),
            &r.split.to_string(),
            &r.n_channels.to_string(),
            &r.sample_rate.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A standardized clip: `samples[channel][n]`, exactly one second long.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelClip {
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: u32,
    pub record: ClipRecord,
}

impl MultichannelClip {
    pub fn n_channels(&self) -> usize {
        self.samples.len()
    }
}

/// Loads the first second of a PCM16 WAV, zero-padding shorter files.
pub fn read_clip(record: &ClipRecord) -> Result<MultichannelClip> {
    let path = &record.path;
    let audio = |message: String| Error::Audio {
        path: path.clone(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(audio(format!(
            "expected 16-bit PCM, got {:?} {} bits",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let n = spec.channels as usize;
    if n != record.n_channels {
        return Err(audio(format!(
            "manifest says {} channels, file has {n}",
            record.n_channels
        )));
    }
    if spec.sample_rate != record.sample_rate {
        return Err(audio(format!(
            "manifest says {} Hz, file has {} Hz",
            record.sample_rate, spec.sample_rate
        )));
    }
    let len = record.sample_rate as usize;
    let mut samples = vec![vec![0.0; len]; n];
    for (i, s) in reader.samples::<i16>().take(len * n).enumerate() {
        let s = s.map_err(|e| audio(e.to_string()))?;
        samples[i % n][i / n] = f64::from(s) / 32768.0;
    }
    Ok(MultichannelClip {
        samples,
        sample_rate: record.sample_rate,
        record: record.clone(),
    })
}

/// ALRAD input: every channel replaced by channel 0.
pub fn replicate_first_channel(clip: &MultichannelClip) -> MultichannelClip {
    let mut out = clip.clone();
    if let Some((first, rest)) = out.samples.split_first_mut() {
        for ch in rest {
            ch.copy_from_slice(first);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    Standard,
    EnvDependent(Env),
    EnvIndependent(Env),
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMode::Standard => f.write_str("standard"),
            SplitMode::EnvDependent(e) => write!(f, "env_dep:{e}"),
            SplitMode::EnvIndependent(e) => write!(f, "env_indep:{e}"),
        }
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "standard" => Ok(SplitMode::Standard),
            Some(("env_dep", e)) => Ok(SplitMode::EnvDependent(e.parse()?)),
            Some(("env_indep", e)) => Ok(SplitMode::EnvIndependent(e.parse()?)),
            _ => Err(Error::Config(format!(
                "split must be standard, env_dep:<E> or env_indep:<E>, got {s:?}"
            ))),
        }
    }
}

/// Returns `(train, test)` in manifest order.
pub fn make_splits(
    records: &[ClipRecord],
    mode: SplitMode,
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let train_split = records.iter().filter(|r| r.split == Split::Train);
    let test_split = records.iter().filter(|r| r.split == Split::Test);
    let (train, test): (Vec<_>, Vec<_>) = match mode {
        SplitMode::Standard => (
            train_split.cloned().collect(),
            test_split.cloned().collect(),
        ),
        SplitMode::EnvDependent(e) | SplitMode::EnvIndependent(e) => {
            if !records.iter().any(|r| r.env == e) {
                return Err(Error::Data(format!("no records for env {e}")));
            }
            let keep_env = matches!(mode, SplitMode::EnvDependent(_));
            (
                train_split
                    .filter(|r| keep_env || r.env != e)
                    .cloned()
                    .collect(),
                test_split.filter(|r| r.env == e).cloned().collect(),
            )
        }
    };
    if train.is_empty() {
        return Err(Error::Data(format!(
            "split {mode}: empty training partition"
        )));
    }
    if test.is_empty() {
        return Err(Error::Data(format!("split {mode}: empty test partition")));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(i: usize, label: Label, env: Env, split: Split) -> ClipRecord {
        ClipRecord {
            path: PathBuf::from(format!("/data/clip{i}.wav")),
            label,
            mic_id: MicId::D2,
            env,
            split,
            n_channels: 4,
            sample_rate: 44_100,
        }
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn header_only_manifest_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "path,label,mic_id,env,split,n_channels,sample_rate\n",
        );
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn wrong_channel_count_names_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "path,label,mic_id,env,split,n_channels,sample_rate\n/a.wav,genuine,D2,A,train,4,44100\n/b.wav,replay,D2,A,train,5,44100\n",
        );
        let msg = load_manifest(&p).unwrap_err().to_string();
        assert!(
            msg.contains(":3:") && msg.contains("n_channels") && msg.contains("must be 4"),
            "{msg}"
        );
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let head = "path,label,mic_id,env,split,n_channels,sample_rate\n";
        for (row, needle) in [
            ("/a.wav,spoof,D1,A,train,2,44100\n", "field label"),
            ("/a.wav,genuine,D9,A,train,2,44100\n", "field mic_id"),
            ("/a.wav,genuine,D1,E,train,2,44100\n", "field env"),
            ("/a.wav,genuine,D1,A,dev,2,44100\n", "field split"),
            ("/a.wav,genuine,D1,A,train,x,44100\n", "field n_channels"),
            ("/a.wav,genuine,D4,A,train,7,44100\n", "field sample_rate"),
            ("/a.wav,genuine,D1,A,train\n", ":2:"),
        ] {
            let p = write(dir.path(), "m.csv", &format!("{head}{row}"));
            let msg = load_manifest(&p).unwrap_err().to_string();
            assert!(msg.contains(needle), "{row}: {msg}");
        }
        let p = write(dir.path(), "m.csv", "path,label\n");
        assert!(load_manifest(&p)
            .unwrap_err()
            .to_string()
            .contains("header"));
        let dup =
            format!("{head}/a.wav,genuine,D1,A,train,2,44100\n/a.wav,replay,D1,A,test,2,44100\n");
        let p = write(dir.path(), "m.csv", &dup);
        assert!(load_manifest(&p)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            record(0, Label::Genuine, Env::A, Split::Train),
            record(1, Label::Replay, Env::C, Split::Test),
            ClipRecord {
                mic_id: MicId::Synthetic,
                n_channels: 3,
                sample_rate: 8_000,
                ..record(2, Label::Replay, Env::D, Split::Train)
            },
        ];
        let p = dir.path().join("m.csv");
        write_manifest(&p, &records).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), records);
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "path,label,mic_id,env,split,n_channels,sample_rate\nclips/a.wav,genuine,D1,A,train,2,44100\n",
        );
        assert_eq!(
            load_manifest(&p).unwrap()[0].path,
            dir.path().join("clips/a.wav")
        );
    }

    fn wav(path: &Path, channels: u16, rate: u32, frames: usize, f: impl Fn(usize, usize) -> i16) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for n in 0..frames {
            for c in 0..channels as usize {
                w.write_sample(f(n, c)).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    fn sim_record(path: PathBuf, n_channels: usize, sample_rate: u32) -> ClipRecord {
        ClipRecord {
            path,
            label: Label::Genuine,
            mic_id: MicId::Synthetic,
            env: Env::A,
            split: Split::Train,
            n_channels,
            sample_rate,
        }
    }

    #[test]
    fn read_clip_truncates_pads_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let long = dir.path().join("long.wav");
        wav(&long, 2, 1000, 2500, |n, c| {
            if n == 0 && c == 0 {
                32767
            } else {
                (c as i16 + 1) * 100
            }
        });
        let clip = read_clip(&sim_record(long, 2, 1000)).unwrap();
        assert_eq!(clip.n_channels(), 2);
        assert!(clip.samples.iter().all(|c| c.len() == 1000));
        assert_eq!(clip.samples[0][0], 32767.0 / 32768.0);
        assert_eq!(clip.samples[1][5], 200.0 / 32768.0);

        let short = dir.path().join("short.wav");
        wav(&short, 1, 1000, 600, |_, _| -32768);
        let clip = read_clip(&sim_record(short, 1, 1000)).unwrap();
        assert_eq!(clip.samples[0].len(), 1000);
        assert!(clip.samples[0][..600].iter().all(|&v| v == -1.0));
        assert!(clip.samples[0][600..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn read_clip_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        wav(&p, 2, 1000, 100, |_, _| 0);
        let msg = read_clip(&sim_record(p.clone(), 3, 1000))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("channels") && msg.contains("a.wav"), "{msg}");
        assert!(read_clip(&sim_record(p, 2, 2000)).is_err());
        let junk = write(dir.path(), "junk.wav", "not a wav file");
        assert!(matches!(
            read_clip(&sim_record(junk, 1, 1000)),
            Err(Error::Audio { .. })
        ));
        assert!(read_clip(&sim_record(dir.path().join("missing.wav"), 1, 1000)).is_err());
    }

    #[test]
    fn replication_copies_channel_zero_and_is_idempotent() {
        let clip = MultichannelClip {
            samples: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            sample_rate: 2,
            record: sim_record(PathBuf::from("x"), 2, 2),
        };
        let r = replicate_first_channel(&clip);
        assert_eq!(r.samples, vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(replicate_first_channel(&r), r);
    }

    fn twenty() -> Vec<ClipRecord> {
        (0..20)
            .map(|i| {
                let label = if i % 2 == 0 {
                    Label::Genuine
                } else {
                    Label::Replay
                };
                let env = [Env::A, Env::B][(i / 2) % 2];
                let split = if i % 5 == 4 {
                    Split::Test
                } else {
                    Split::Train
                };
                record(i, label, env, split)
            })
            .collect()
    }

    #[test]
    fn split_modes() {
        let recs = twenty();
        let (tr, te) = make_splits(&recs, SplitMode::Standard).unwrap();
        assert_eq!(tr.len() + te.len(), 20);
        assert!(tr.iter().all(|r| !te.contains(r)));

        let (dep_tr, dep_te) = make_splits(&recs, SplitMode::EnvDependent(Env::A)).unwrap();
        assert_eq!(dep_tr, tr);
        assert!(dep_te
            .iter()
            .all(|r| r.env == Env::A && r.split == Split::Test));

        let (ind_tr, ind_te) = make_splits(&recs, SplitMode::EnvIndependent(Env::A)).unwrap();
        assert!(ind_tr.iter().all(|r| r.env != Env::A));
        assert_eq!(ind_te, dep_te);
        let a_train = recs
            .iter()
            .filter(|r| r.env == Env::A && r.split == Split::Train)
            .count();
        assert_eq!(ind_tr.len() + a_train, tr.len());

        assert!(make_splits(&recs, SplitMode::EnvIndependent(Env::C)).is_err());
        let only_a: Vec<_> = recs.iter().filter(|r| r.env == Env::A).cloned().collect();
        assert!(make_splits(&only_a, SplitMode::EnvIndependent(Env::A)).is_err());
    }

    #[test]
    fn split_mode_parsing() {
        assert_eq!(
            "standard".parse::<SplitMode>().unwrap(),
            SplitMode::Standard
        );
        assert_eq!(
            "env_dep:B".parse::<SplitMode>().unwrap(),
            SplitMode::EnvDependent(Env::B)
        );
        assert_eq!(
            "env_indep:D".parse::<SplitMode>().unwrap(),
            SplitMode::EnvIndependent(Env::D)
        );
        for bad in ["env_dep", "env_indep:Z", "random"] {
            assert!(bad.parse::<SplitMode>().is_err());
        }
        for m in [SplitMode::Standard, SplitMode::EnvIndependent(Env::C)] {
            assert_eq!(m.to_string().parse::<SplitMode>().unwrap(), m);
        }
    }
}
