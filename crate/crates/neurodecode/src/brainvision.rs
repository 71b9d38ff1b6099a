//! Subset of the BrainVision exchange format: an INI-style `.vhdr` header
//! next to a raw `.eeg` payload of little-endian float32 samples stored
//! sample-major (multiplexed).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use neurodecode_core::data::{EegRecording, SensorLayout};
use neurodecode_core::Tensor;

use crate::error::{Error, FormatError, Result};

pub const FLOAT_FORMAT: &str = "IEEE_FLOAT_32";
pub const MULTIPLEXED: &str = "MULTIPLEXED";

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelInfo {
    pub name: String,
    pub reference: String,
    pub resolution: f64,
    pub unit: String,
}

impl ChannelInfo {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            reference: String::new(),
            resolution: 1.0,
            unit: "µV".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub data_file: String,
    pub sampling_interval_us: f64,
    pub channels: Vec<ChannelInfo>,
}

impl Header {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        1e6 / self.sampling_interval_us
    }
}

struct Entry {
    value: String,
    line: usize,
}

fn unescape(s: &str) -> String {
    s.replace("\\1", ",")
}

fn escape(s: &str) -> String {
    s.replace(',', "\\1")
}

/// Parses a `.vhdr` header. Unknown sections and keys are ignored.
pub fn parse_header(text: &str) -> std::result::Result<Header, FormatError> {
    let mut common: BTreeMap<String, Entry> = BTreeMap::new();
    let mut chans: BTreeMap<usize, (ChannelInfo, usize)> = BTreeMap::new();
    let mut section: Option<(String, usize)> = None;
    let mut common_line = None;
    let mut chan_line = None;
    let mut last_line = 0;
    let mut seen_content = false;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') {
            let name = line
                .strip_prefix('[')
                .and_then(|l| l.strip_suffix(']'))
                .ok_or_else(|| FormatError::Syntax {
                    line: line_no,
                    message: format!("unterminated section header {line:?}"),
                })?;
            match name {
                "Common Infos" => common_line = Some(line_no),
                "Channel Infos" => chan_line = Some(line_no),
                _ => {}
            }
            section = Some((name.to_string(), line_no));
            seen_content = true;
            continue;
        }
        let Some((sec, _)) = &section else {
            // the identification line precedes the first section
            if !seen_content && line.starts_with("Brain Vision") {
                seen_content = true;
                continue;
            }
            return Err(FormatError::Syntax {
                line: line_no,
                message: "content before the first section".into(),
            });
        };
        let known = matches!(sec.as_str(), "Common Infos" | "Binary Infos" | "Channel Infos");
        if !known {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| FormatError::Syntax {
            line: line_no,
            message: format!("expected key=value, found {line:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if sec == "Channel Infos" {
            let index: usize = key
                .strip_prefix("Ch")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n >= 1)
                .ok_or_else(|| FormatError::Syntax {
                    line: line_no,
                    message: format!("channel key {key:?} is not Ch<n> with n >= 1"),
                })?;
            if chans.contains_key(&index) {
                return Err(FormatError::DuplicateChannel { index, line: line_no });
            }
            let mut parts = value.split(',');
            let name = unescape(parts.next().unwrap_or("").trim());
            if name.is_empty() {
                return Err(FormatError::Syntax {
                    line: line_no,
                    message: format!("channel {index} has no name"),
                });
            }
            let reference = unescape(parts.next().unwrap_or("").trim());
            let resolution = match parts.next().map(str::trim) {
                None | Some("") => 1.0,
                Some(r) => r.parse().map_err(|_| FormatError::Syntax {
                    line: line_no,
                    message: format!("channel {index} resolution {r:?} is not a number"),
                })?,
            };
            let unit = parts.next().map(|u| unescape(u.trim())).unwrap_or_else(|| "µV".into());
            chans.insert(index, (ChannelInfo { name, reference, resolution, unit }, line_no));
        } else {
            if common.contains_key(key) {
                return Err(FormatError::Syntax {
                    line: line_no,
                    message: format!("key {key} given twice"),
                });
            }
            common.insert(key.to_string(), Entry { value: value.to_string(), line: line_no });
        }
    }

    let missing_line = common_line.unwrap_or(last_line);
    let required = |key: &str| -> std::result::Result<&Entry, FormatError> {
        common.get(key).ok_or_else(|| FormatError::MissingKey {
            key: key.into(),
            line: missing_line,
        })
    };

    let data_file = required("DataFile")?.value.clone();
    let n = required("NumberOfChannels")?;
    let n_channels: usize = n.value.parse().ok().filter(|&n| n > 0).ok_or_else(|| FormatError::Syntax {
        line: n.line,
        message: format!("NumberOfChannels={} is not a positive integer", n.value),
    })?;
    let si = required("SamplingInterval")?;
    let sampling_interval_us: f64 = si
        .value
        .parse()
        .ok()
        .filter(|v: &f64| *v > 0.0 && v.is_finite())
        .ok_or_else(|| FormatError::Syntax {
            line: si.line,
            message: format!("SamplingInterval={} is not a positive number", si.value),
        })?;
    let bf = required("BinaryFormat")?;
    if bf.value != FLOAT_FORMAT {
        return Err(FormatError::Unsupported {
            key: "BinaryFormat".into(),
            value: bf.value.clone(),
            line: bf.line,
        });
    }
    for key in ["DataOrientation", "Orientation"] {
        if let Some(e) = common.get(key).filter(|e| e.value != MULTIPLEXED) {
            return Err(FormatError::Unsupported {
                key: key.into(),
                value: e.value.clone(),
                line: e.line,
            });
        }
    }
    if let Some(e) = common.get("DataFormat").filter(|e| e.value != "BINARY") {
        return Err(FormatError::Unsupported {
            key: "DataFormat".into(),
            value: e.value.clone(),
            line: e.line,
        });
    }

    if let Some((&index, &(_, line))) = chans.range(n_channels + 1..).next() {
        return Err(FormatError::Syntax {
            line,
            message: format!("channel {index} exceeds NumberOfChannels={n_channels}"),
        });
    }
    let mut channels = Vec::with_capacity(n_channels);
    for k in 1..=n_channels {
        let (info, _) = chans.remove(&k).ok_or_else(|| FormatError::MissingKey {
            key: format!("Ch{k}"),
            line: chan_line.unwrap_or(last_line),
        })?;
        channels.push(info);
    }
    Ok(Header {
        data_file,
        sampling_interval_us,
        channels,
    })
}

/// Renders a header that [`parse_header`] reads back unchanged.
pub fn write_header(h: &Header) -> String {
    let mut s = String::from("Brain Vision Data Exchange Header File Version 1.0\n");
    s.push_str("; Data written by neurodecode\n\n[Common Infos]\nCodepage=UTF-8\n");
    let _ = writeln!(s, "DataFile={}", h.data_file);
    s.push_str("DataFormat=BINARY\n");
    let _ = writeln!(s, "DataOrientation={MULTIPLEXED}");
    let _ = writeln!(s, "NumberOfChannels={}", h.channels.len());
    let _ = writeln!(s, "SamplingInterval={}", h.sampling_interval_us);
    let _ = writeln!(s, "\n[Binary Infos]\nBinaryFormat={FLOAT_FORMAT}\n\n[Channel Infos]");
    for (i, c) in h.channels.iter().enumerate() {
        let _ = writeln!(
            s,
            "Ch{}={},{},{},{}",
            i + 1,
            escape(&c.name),
            escape(&c.reference),
            c.resolution,
            escape(&c.unit)
        );
    }
    s
}

/// De-interleaves a multiplexed float32 payload into `[C × T]`.
pub fn read_binary(data: &[u8], n_channels: usize) -> std::result::Result<Tensor, FormatError> {
    let frame = 4 * n_channels;
    if n_channels == 0 || !data.len().is_multiple_of(frame) {
        return Err(FormatError::Truncated {
            len: data.len(),
            channels: n_channels,
        });
    }
    let t = data.len() / frame;
    if t == 0 {
        return Err(FormatError::NoSamples);
    }
    let mut out = vec![0.0; n_channels * t];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        out[(k % n_channels) * t + k / n_channels] = f64::from(v);
    }
    Ok(Tensor::new([n_channels, t], out).expect("shape matches buffer"))
}

/// Interleaves `[C × T]` into a multiplexed float32 payload. Values are
/// narrowed to single precision.
pub fn write_binary(x: &Tensor) -> Vec<u8> {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    let mut out = Vec::with_capacity(4 * c * t);
    for s in 0..t {
        for ch in 0..c {
            out.extend_from_slice(&(x.data()[ch * t + s] as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a header and its data file, resolving the data file next to the
/// header.
pub fn read_files(vhdr: &Path) -> Result<(Header, Tensor)> {
    let text = fs::read_to_string(vhdr).map_err(Error::io(vhdr))?;
    let header = parse_header(&text).map_err(|e| e.in_file(vhdr))?;
    let data_path = vhdr.parent().unwrap_or(Path::new(".")).join(&header.data_file);
    let bytes = fs::read(&data_path).map_err(Error::io(&data_path))?;
    let data = read_binary(&bytes, header.n_channels()).map_err(|e| e.in_file(&data_path))?;
    Ok((header, data))
}

/// Loads one subject's recording; `layout` gives a position per channel
/// name.
pub fn read_recording(vhdr: &Path, subject_id: &str, layout: &BTreeMap<String, [f64; 2]>) -> Result<EegRecording> {
    let (header, data) = read_files(vhdr)?;
    let names: Vec<String> = header.channels.iter().map(|c| c.name.clone()).collect();
    let positions = names
        .iter()
        .map(|n| {
            layout
                .get(n)
                .copied()
                .ok_or_else(|| Error::Data(format!("{}: channel {n} has no layout position", vhdr.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EegRecording::new(
        subject_id,
        header.sample_rate_hz(),
        names,
        data,
        SensorLayout::new(positions)?,
    )?)
}

/// Writes `dir/stem.vhdr` and `dir/stem.eeg`.
pub fn write_recording(dir: &Path, stem: &str, rec: &EegRecording) -> Result<()> {
    let header = Header {
        data_file: format!("{stem}.eeg"),
        sampling_interval_us: 1e6 / rec.sample_rate_hz,
        channels: rec.channel_names.iter().map(ChannelInfo::named).collect(),
    };
    let vhdr = dir.join(format!("{stem}.vhdr"));
    fs::write(&vhdr, write_header(&header)).map_err(Error::io(&vhdr))?;
    let eeg = dir.join(&header.data_file);
    fs::write(&eeg, write_binary(&rec.data)).map_err(Error::io(&eeg))
}
