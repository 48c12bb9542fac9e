//! Grayscale rendering of one latent channel.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::LatentVideo;

pub const MID_GRAY: u8 = 128;

/// 8-bit frames of one channel, indexed `[frame][h * width + w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayVideo {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Vec<u8>>,
    /// Set when the channel was constant and every pixel was mapped to mid-gray.
    pub constant: bool,
}

/// Min-max normalizes channel `channel` over the whole video to `0..=255`,
/// rounding half to even.
pub fn to_gray(video: &LatentVideo, channel: usize) -> Result<GrayVideo> {
    let d = video.dims();
    if channel >= d.channels {
        return Err(Error::Domain(format!("channel {channel} out of range for {d}")));
    }
    let values = video.channel(channel);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let constant = !(hi > lo);
    let frames = (0..d.frames)
        .map(|f| {
            let mut px = vec![0u8; d.width * d.height];
            for w in 0..d.width {
                for h in 0..d.height {
                    let x = video.get(f, w, h, channel);
                    px[h * d.width + w] = if constant {
                        MID_GRAY
                    } else {
                        (255.0 * (x - lo) / (hi - lo)).round_ties_even().clamp(0.0, 255.0) as u8
                    };
                }
            }
            px
        })
        .collect();
    Ok(GrayVideo {
        width: d.width,
        height: d.height,
        frames,
        constant,
    })
}

/// Binary PGM (P5) bytes for one frame.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Length {
            expected: width * height,
            found: pixels.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Writes `frame_0000.pgm`, `frame_0001.pgm`, ... into `dir`.
pub fn write_frames(gray: &GrayVideo, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    gray.frames
        .iter()
        .enumerate()
        .map(|(i, px)| {
            let path = dir.join(format!("frame_{i:04}.pgm"));
            fs::File::create(&path)?.write_all(&encode_pgm(gray.width, gray.height, px)?)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims;

    #[test]
    fn hand_computed_two_frames() {
        let d = Dims::new(2, 2, 2, 1).unwrap();
        // Frame f holds f * [[0, 1], [2, 3]] indexed [w][h].
        let v = LatentVideo::from_fn(d, |f, w, h, _| (f * (2 * w + h)) as f64);
        let g = to_gray(&v, 0).unwrap();
        assert!(!g.constant);
        assert_eq!(g.frames[0], vec![0, 0, 0, 0]);
        // Row-major by h: (w0,h0)=0, (w1,h0)=2, (w0,h1)=1, (w1,h1)=3.
        assert_eq!(g.frames[1], vec![0, 170, 85, 255]);
    }

    #[test]
    fn ties_round_to_even() {
        let d = Dims::new(1, 4, 1, 1).unwrap();
        let xs = [0.0, 2.5, 127.5, 255.0];
        let v = LatentVideo::from_fn(d, |_, w, _, _| xs[w]);
        assert_eq!(to_gray(&v, 0).unwrap().frames[0], vec![0, 2, 128, 255]);
    }

    #[test]
    fn extremes_map_to_endpoints() {
        let d = Dims::new(3, 4, 5, 2).unwrap();
        let v = LatentVideo::from_fn(d, |f, w, h, c| ((f * 7 + w * 3 + h) as f64).sin() + c as f64);
        let g = to_gray(&v, 1).unwrap();
        let all: Vec<u8> = g.frames.concat();
        assert_eq!(*all.iter().max().unwrap(), 255);
        assert_eq!(*all.iter().min().unwrap(), 0);
    }

    #[test]
    fn constant_channel_is_mid_gray() {
        let d = Dims::new(2, 3, 3, 1).unwrap();
        let g = to_gray(&LatentVideo::filled(d, 0.7), 0).unwrap();
        assert!(g.constant);
        assert!(g.frames.iter().flatten().all(|&p| p == MID_GRAY));
    }

    #[test]
    fn bad_channel() {
        let d = Dims::new(1, 1, 1, 2).unwrap();
        assert!(to_gray(&LatentVideo::zeros(d), 2).is_err());
    }

    #[test]
    fn pgm_layout() {
        let bytes = encode_pgm(2, 1, &[7, 9]).unwrap();
        assert_eq!(bytes, b"P5\n2 1\n255\n\x07\x09");
        assert!(encode_pgm(2, 2, &[1]).is_err());
    }

    #[test]
    fn frames_written_with_padded_names() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dims::new(3, 2, 2, 1).unwrap();
        let g = to_gray(&LatentVideo::from_fn(d, |f, _, _, _| f as f64), 0).unwrap();
        let paths = write_frames(&g, dir.path()).unwrap();
        assert_eq!(paths[2].file_name().unwrap(), "frame_0002.pgm");
        assert_eq!(fs::read(&paths[2]).unwrap().len(), 11 + 4);
    }
}
