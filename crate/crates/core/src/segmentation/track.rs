//! Track files: one JSON header line followed by one JSON record per frame.
//!
//! ```text
//! {"schema":"scrapline.track.v1","railcar_id":"RC-00017","line":2}
//! {"frame":0,"timestamp_ms":0,"magnet":{"x":..,"y":..,"w":..,"h":..},"railcar":{..},"railcar_centroid":[320.0,200.0],"quality":{"blur":0.1,"exposure":0.5}}
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{FrameQuality, Result, SegmentationError};

pub const TRACK_SCHEMA: &str = "scrapline.track.v1";

/// Axis-aligned box in pixels, `(x, y)` the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 0.0 || self.h < 0.0 || !self.w.is_finite() || !self.h.is_finite() {
            return Err(SegmentationError::NegativeExtent { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn contains(&self, (px, py): (f64, f64)) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: u64,
    pub timestamp_ms: i64,
    pub magnet: BBox,
    pub railcar: BBox,
    pub railcar_centroid: (f64, f64),
    pub quality: FrameQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionTrack {
    pub railcar_id: String,
    pub line: u16,
    pub records: Vec<TrackRecord>,
}

impl DetectionTrack {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(SegmentationError::EmptyTrack);
        }
        for pair in self.records.windows(2) {
            if pair[1].frame <= pair[0].frame {
                return Err(SegmentationError::NonMonotonicFrames {
                    prev: pair[0].frame,
                    next: pair[1].frame,
                });
            }
        }
        for r in &self.records {
            r.magnet.validate()?;
            r.railcar.validate()?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
    railcar_id: String,
    line: u16,
}

pub fn write_track<W: Write>(mut w: W, track: &DetectionTrack) -> Result<()> {
    let io = |e: std::io::Error| SegmentationError::Io(e.to_string());
    let header = Header {
        schema: TRACK_SCHEMA.to_string(),
        railcar_id: track.railcar_id.clone(),
        line: track.line,
    };
    let ser = |e: serde_json::Error| SegmentationError::Io(e.to_string());
    writeln!(w, "{}", serde_json::to_string(&header).map_err(ser)?).map_err(io)?;
    for r in &track.records {
        writeln!(w, "{}", serde_json::to_string(r).map_err(ser)?).map_err(io)?;
    }
    Ok(())
}

pub fn read_track<R: BufRead>(r: R) -> Result<DetectionTrack> {
    let mut lines = r.lines().enumerate();
    let parse_err = |line: usize, e: &dyn std::fmt::Display| SegmentationError::Parse {
        line: line + 1,
        message: e.to_string(),
    };
    let (_, first) = lines.next().ok_or(SegmentationError::EmptyTrack)?;
    let first = first.map_err(|e| SegmentationError::Io(e.to_string()))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(0, &e))?;
    if header.schema != TRACK_SCHEMA {
        return Err(parse_err(0, &format!("unsupported schema `{}`", header.schema)));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| SegmentationError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| parse_err(i, &e))?);
    }
    let track = DetectionTrack {
        railcar_id: header.railcar_id,
        line: header.line,
        records,
    };
    track.validate()?;
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn track_file_round_trip() {
        let track = DetectionTrack {
            railcar_id: "RC-1".into(),
            line: 4,
            records: (0..3)
                .map(|i| TrackRecord {
                    frame: i,
                    timestamp_ms: i as i64 * 40,
                    magnet: BBox::new(10.0, 10.0, 5.5, 4.0),
                    railcar: BBox::new(0.0, 0.0, 100.0, 50.0),
                    railcar_centroid: (50.0, 25.0),
                    quality: FrameQuality::nominal(),
                })
                .collect(),
        };
        let mut buf = Vec::new();
        write_track(&mut buf, &track).unwrap();
        assert_eq!(read_track(buf.as_slice()).unwrap(), track);
    }

    #[test]
    fn non_monotonic_frames_rejected() {
        let text = format!(
            "{}\n{}\n{}\n",
            r#"{"schema":"scrapline.track.v1","railcar_id":"x","line":0}"#,
            r#"{"frame":3,"timestamp_ms":0,"magnet":{"x":0,"y":0,"w":1,"h":1},"railcar":{"x":0,"y":0,"w":1,"h":1},"railcar_centroid":[0.5,0.5],"quality":{"blur":0.1,"exposure":0.5}}"#,
            r#"{"frame":3,"timestamp_ms":1,"magnet":{"x":0,"y":0,"w":1,"h":1},"railcar":{"x":0,"y":0,"w":1,"h":1},"railcar_centroid":[0.5,0.5],"quality":{"blur":0.1,"exposure":0.5}}"#,
        );
        assert!(matches!(
            read_track(text.as_bytes()),
            Err(SegmentationError::NonMonotonicFrames { prev: 3, next: 3 })
        ));
    }
}
