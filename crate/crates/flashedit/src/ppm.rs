//! Binary PPM (P6, 8-bit) IO for [3, H, W] images in [-1, 1], plus 0/255
//! masks stored in the same container.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

fn quantize(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

pub fn write_ppm<E: Scalar>(path: &Path, img: &Tensor<E>) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidShape(format!("PPM wants [3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            buf.push(quantize(img.data()[ch * hw + p].f64()));
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm<E: Scalar>(path: &Path) -> Result<Tensor<E>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    // Three whitespace-separated header fields after the magic; comments start
    // with '#'. Tokens are collected byte by byte to leave the stream exactly
    // at the start of pixel data.
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)?;
    if &magic != b"P6" {
        return Err(Error::InvalidArgument("not a binary PPM (P6) file".into()));
    }
    while header.len() < 3 {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        match b[0] {
            b'#' => {
                let mut junk = Vec::new();
                r.read_until(b'\n', &mut junk)?;
            }
            c if c.is_ascii_whitespace() => {}
            c => {
                let mut tok = vec![c];
                loop {
                    let mut b = [0u8; 1];
                    r.read_exact(&mut b)?;
                    if b[0].is_ascii_whitespace() {
                        break;
                    }
                    tok.push(b[0]);
                }
                let s = String::from_utf8(tok)
                    .map_err(|_| Error::InvalidArgument("bad PPM header".into()))?;
                header.push(
                    s.parse::<usize>()
                        .map_err(|_| Error::InvalidArgument("bad PPM header field".into()))?,
                );
            }
        }
    }
    let (w, h, maxval) = (header[0], header[1], header[2]);
    if maxval != 255 {
        return Err(Error::InvalidArgument("only 8-bit PPM supported".into()));
    }
    let hw = h * w;
    let mut buf = vec![0u8; 3 * hw];
    r.read_exact(&mut buf)?;
    let mut img = Tensor::zeros(vec![3, h, w]);
    for p in 0..hw {
        for ch in 0..3 {
            img.data_mut()[ch * hw + p] = E::of(dequantize(buf[3 * p + ch]));
        }
    }
    Ok(img)
}

/// Writes a boolean pixel mask as a PPM with 0/255 in every channel.
pub fn write_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::InvalidShape("mask length must be h*w".into()));
    }
    let img = Tensor::from_fn(vec![3, h, w], |i| if mask[i % (h * w)] { 1.0f64 } else { -1.0 });
    write_ppm(path, &img)
}

/// Reads a 0/255 mask back; any channel above midpoint marks the pixel set.
pub fn read_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = read_ppm::<f64>(path)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let hw = h * w;
    let mask = (0..hw).map(|p| (0..3).any(|ch| img.data()[ch * hw + p] > 0.0)).collect();
    Ok((mask, h, w))
}
