//! Binary spike-event files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic           4 bytes  "LDLF"
//! version         u16      1
//! flags           u16      0
//! neuron_count    u32
//! timestep_count  u32
//! sample_count    u32
//! sample_count times:
//!     label        u32      u32::MAX when unlabeled
//!     event_count  u32
//!     event_count times: timestep u32, neuron_id u32
//! ```
//!
//! Events inside a sample are strictly increasing in `(timestep, neuron_id)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::neuron::{SpikeTrain, SpikeVector};

pub const MAGIC: [u8; 4] = *b"LDLF";
pub const VERSION: u16 = 1;
pub const UNLABELED: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct EventFileHeader {
    pub version: u16,
    pub neuron_count: u32,
    pub timestep_count: u32,
    pub sample_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub label: Option<u32>,
    pub events: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeEventFile {
    pub header: EventFileHeader,
    pub samples: Vec<EventRecord>,
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Format("file truncated".into())
        }
        e => e,
    }
}

pub fn read_header<R: Read>(r: &mut R) -> Result<EventFileHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| truncated(e.into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u16(r).map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let flags = read_u16(r).map_err(truncated)?;
    if flags != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#x}")));
    }
    Ok(EventFileHeader {
        version,
        neuron_count: read_u32(r).map_err(truncated)?,
        timestep_count: read_u32(r).map_err(truncated)?,
        sample_count: read_u32(r).map_err(truncated)?,
    })
}

/// Parses and validates a whole file. Validation errors carry the index of
/// the first offending event counted across the file.
pub fn decode<R: Read>(mut r: R) -> Result<SpikeEventFile> {
    let header = read_header(&mut r)?;
    let mut samples = Vec::with_capacity(header.sample_count.min(1 << 16) as usize);
    let mut index = 0usize;
    for _ in 0..header.sample_count {
        let label = read_u32(&mut r).map_err(truncated)?;
        let n = read_u32(&mut r).map_err(truncated)?;
        let mut events = Vec::with_capacity(n.min(1 << 20) as usize);
        let mut prev: Option<(u32, u32)> = None;
        for _ in 0..n {
            let t = read_u32(&mut r).map_err(truncated)?;
            let id = read_u32(&mut r).map_err(truncated)?;
            if t >= header.timestep_count || id >= header.neuron_count {
                return Err(Error::Validation {
                    index,
                    reason: format!(
                        "event (t={t}, id={id}) outside {}x{}",
                        header.timestep_count, header.neuron_count
                    ),
                });
            }
            if prev.is_some_and(|p| p >= (t, id)) {
                return Err(Error::Validation {
                    index,
                    reason: format!("event (t={t}, id={id}) is unsorted or duplicated"),
                });
            }
            prev = Some((t, id));
            events.push((t, id));
            index += 1;
        }
        samples.push(EventRecord {
            label: (label != UNLABELED).then_some(label),
            events,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after last sample".into()));
    }
    Ok(SpikeEventFile { header, samples })
}

pub fn encode<W: Write>(mut w: W, file: &SpikeEventFile) -> Result<()> {
    let h = &file.header;
    w.write_all(&MAGIC)?;
    w.write_all(&h.version.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&h.neuron_count.to_le_bytes())?;
    w.write_all(&h.timestep_count.to_le_bytes())?;
    w.write_all(&(file.samples.len() as u32).to_le_bytes())?;
    for s in &file.samples {
        w.write_all(&s.label.unwrap_or(UNLABELED).to_le_bytes())?;
        w.write_all(&(s.events.len() as u32).to_le_bytes())?;
        for &(t, id) in &s.events {
            w.write_all(&t.to_le_bytes())?;
            w.write_all(&id.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Events of a dense train in canonical order.
pub fn train_to_events(train: &SpikeTrain) -> Vec<(u32, u32)> {
    train
        .frames
        .iter()
        .enumerate()
        .flat_map(|(t, f)| f.active().map(move |i| (t as u32, i as u32)))
        .collect()
}

pub fn events_to_train(h: &EventFileHeader, events: &[(u32, u32)]) -> SpikeTrain {
    let mut frames = vec![SpikeVector::zeros(h.neuron_count as usize); h.timestep_count as usize];
    for &(t, id) in events {
        frames[t as usize].s[id as usize] = true;
    }
    SpikeTrain {
        width: h.neuron_count as usize,
        frames,
    }
}

fn checked_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("{what} {x} does not fit in u32")))
}

fn file_for(width: usize, steps: usize, samples: Vec<EventRecord>) -> Result<SpikeEventFile> {
    Ok(SpikeEventFile {
        header: EventFileHeader {
            version: VERSION,
            neuron_count: checked_u32(width, "neuron count")?,
            timestep_count: checked_u32(steps, "timestep count")?,
            sample_count: checked_u32(samples.len(), "sample count")?,
        },
        samples,
    })
}

/// Reads a single-train file into a dense `timestep_count x neuron_count`
/// train.
pub fn load_events(path: impl AsRef<Path>) -> Result<SpikeTrain> {
    let f = decode(BufReader::new(File::open(path)?))?;
    if f.samples.len() != 1 {
        return Err(Error::Format(format!(
            "expected one train, file holds {}",
            f.samples.len()
        )));
    }
    Ok(events_to_train(&f.header, &f.samples[0].events))
}

pub fn save_events(path: impl AsRef<Path>, train: &SpikeTrain) -> Result<()> {
    let file = file_for(
        train.width,
        train.steps(),
        vec![EventRecord {
            label: None,
            events: train_to_events(train),
        }],
    )?;
    encode(BufWriter::new(File::create(path)?), &file)
}

/// Every sample must carry a label.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let f = decode(BufReader::new(File::open(path)?))?;
    f.samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let label = s
                .label
                .ok_or_else(|| Error::Format(format!("sample {k} has no label")))?;
            Ok(Sample {
                train: events_to_train(&f.header, &s.events),
                label: label as usize,
            })
        })
        .collect()
}

/// All samples must share one shape.
pub fn save_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let (width, steps) = samples
        .first()
        .map_or((0, 0), |s| (s.train.width, s.train.steps()));
    let records = samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            if s.train.width != width || s.train.steps() != steps {
                return Err(Error::Shape(format!("sample {k} has a different shape")));
            }
            Ok(EventRecord {
                label: Some(checked_u32(s.label, "label")?),
                events: train_to_events(&s.train),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    encode(
        BufWriter::new(File::create(path)?),
        &file_for(width, steps, records)?,
    )
}
