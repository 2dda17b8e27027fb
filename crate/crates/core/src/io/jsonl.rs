//! JSON-lines readers and writers for pose and face-box tracks.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::av_classifier::FaceBox;
use crate::error::{Error, Result};
use crate::io::container::{read_file, write_file};
use crate::par_mask::PoseFrame;

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses one value per non-blank line; errors name the offending line.
pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::InvalidArgument(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_file(path, to_jsonl(rows)?.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::InvalidArgument(format!("{} is not UTF-8", path.display())))?;
    from_jsonl(&text)
}

/// Pose frames sorted by `frame_index`, rejecting duplicates.
pub fn read_poses(path: &Path) -> Result<Vec<PoseFrame>> {
    let mut frames: Vec<PoseFrame> = read_jsonl(path)?;
    frames.sort_by_key(|f| f.frame_index);
    if frames.windows(2).any(|w| w[0].frame_index == w[1].frame_index) {
        return Err(Error::InvalidArgument(format!("{} repeats a frame index", path.display())));
    }
    for f in &frames {
        for kp in &f.keypoints {
            kp.validate()?;
        }
    }
    Ok(frames)
}

pub fn read_face_boxes(path: &Path) -> Result<Vec<FaceBox>> {
    let boxes: Vec<FaceBox> = read_jsonl(path)?;
    if let Some(b) = boxes.iter().find(|b| !(b.x1 > b.x0 && b.y1 > b.y0)) {
        return Err(Error::InvalidArgument(format!("empty face box in frame {}", b.frame_index)));
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par_mask::{Keypoint, Region};

    #[test]
    fn pose_lines_round_trip() {
        let frames = vec![
            PoseFrame {
                frame_index: 0,
                keypoints: vec![Keypoint::new(1.5, 2.0, 0.9, Region::Hand).unwrap()],
            },
            PoseFrame {
                frame_index: 1,
                keypoints: vec![],
            },
        ];
        let text = to_jsonl(&frames).unwrap();
        assert!(text.contains(r#""region":"hand""#));
        let back: Vec<PoseFrame> = from_jsonl(&text).unwrap();
        assert_eq!(back, frames);
        assert_eq!(to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn bad_line_is_reported() {
        let err = from_jsonl::<FaceBox>("{\"frame_index\":0,\"x0\":0,\"y0\":0,\"x1\":1,\"y1\":1}\nnot json\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
