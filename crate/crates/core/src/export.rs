//! PNG frame grids and animated GIFs of decoded videos.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgb, RgbImage, RgbaImage};

use crate::data::VideoTensor;
use crate::error::{MebtError, Result};

fn pixel(video: &VideoTensor, t: usize, y: usize, x: usize) -> [u8; 3] {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if video.channels == 1 {
        let g = q(video.get(t, y, x, 0));
        [g, g, g]
    } else {
        [
            q(video.get(t, y, x, 0)),
            q(video.get(t, y, x, 1)),
            q(video.get(t, y, x, 2)),
        ]
    }
}

fn check(video: &VideoTensor) -> Result<()> {
    if video.frames == 0 || !(video.channels == 1 || video.channels == 3) {
        return Err(MebtError::config("export needs a non-empty 1- or 3-channel video"));
    }
    Ok(())
}

/// Frames laid out row by row, `columns` per row, with a 1-pixel gutter.
pub fn frame_grid(video: &VideoTensor, columns: usize) -> Result<RgbImage> {
    check(video)?;
    let cols = columns.clamp(1, video.frames);
    let rows = video.frames.div_ceil(cols);
    let (fh, fw) = (video.height + 1, video.width + 1);
    let mut img = RgbImage::from_pixel((cols * fw + 1) as u32, (rows * fh + 1) as u32, Rgb([255, 255, 255]));
    for t in 0..video.frames {
        let (oy, ox) = ((t / cols) * fh + 1, (t % cols) * fw + 1);
        for y in 0..video.height {
            for x in 0..video.width {
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb(pixel(video, t, y, x)));
            }
        }
    }
    Ok(img)
}

pub fn save_frame_grid(video: &VideoTensor, columns: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    frame_grid(video, columns)?
        .save(path)
        .map_err(|e| MebtError::io(path, std::io::Error::other(e)))
}

/// Looping GIF at the video's frame rate, pixels scaled up by `zoom`.
pub fn save_gif(video: &VideoTensor, zoom: usize, path: impl AsRef<Path>) -> Result<()> {
    check(video)?;
    let path = path.as_ref();
    let err = |e: image::ImageError| MebtError::io(path, std::io::Error::other(e));
    let file = File::create(path).map_err(|e| MebtError::io(path, e))?;
    let mut enc = GifEncoder::new(BufWriter::new(file));
    enc.set_repeat(Repeat::Infinite).map_err(err)?;
    let z = zoom.max(1);
    let delay = Delay::from_numer_denom_ms(1000, video.frame_rate.max(1));
    for t in 0..video.frames {
        let mut img = RgbaImage::new((video.width * z) as u32, (video.height * z) as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            let [r, g, b] = pixel(video, t, y as usize / z, x as usize / z);
            *p = image::Rgba([r, g, b, 255]);
        }
        enc.encode_frame(Frame::from_parts(img, 0, 0, delay)).map_err(err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_video, SceneSpec};

    #[test]
    fn grid_layout_and_files() {
        let v = gen_synthetic_video(&SceneSpec::default(), 5, 2).unwrap();
        let img = frame_grid(&v, 4).unwrap();
        assert_eq!(img.dimensions(), (4 * 33 + 1, 2 * 33 + 1));
        assert_eq!(img.get_pixel(1, 1).0, pixel(&v, 0, 0, 0));
        // frame 4 opens the second row
        assert_eq!(img.get_pixel(1 + 3, 34 + 2).0, pixel(&v, 4, 2, 3));
        assert_eq!(img.get_pixel(34, 1).0, pixel(&v, 1, 0, 0));
        let dir = tempfile::tempdir().unwrap();
        save_frame_grid(&v, 4, dir.path().join("g.png")).unwrap();
        save_gif(&v, 2, dir.path().join("v.gif")).unwrap();
        let back = image::open(dir.path().join("g.png")).unwrap().to_rgb8();
        assert_eq!(back, img);
        assert!(std::fs::metadata(dir.path().join("v.gif")).unwrap().len() > 0);
    }
}
