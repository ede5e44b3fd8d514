//! PNG image grids.

use std::path::Path;

use pdae_autograd::{Float, Tensor};

use crate::error::{invalid, Error, Result};

/// Tiles `[N, C, H, W]` images in `[-1, 1]` into rows of `cols` with a
/// one-pixel border. One or three channels.
pub fn save_grid<F: Float>(images: &Tensor<F>, cols: usize, path: &Path) -> Result<()> {
    let (n, c, h, w) = images.dims4();
    if c != 1 && c != 3 {
        return invalid(format!("cannot render {c}-channel images"));
    }
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut buf = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([40, 40, 40]));
    for k in 0..n {
        let item = images.item(k);
        let (ox, oy) = (1 + (k % cols) * (w + 1), 1 + (k / cols) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = item[ch * h * w + y * w + x].as_f64();
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                buf.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(rgb));
            }
        }
    }
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
}
