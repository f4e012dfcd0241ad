//! PNG encodings shared by the dataset layout, the CLI and the HTTP service.
//!
//! Intent masks are single-channel 8-bit PNGs: 0 is removal (-1), 128 is no
//! intent (0) and 255 is creation (+1). Any other value is rejected.

use std::io::Cursor;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, TernaryIntentMask};
use crate::tensor::Tensor;

pub const REMOVAL_LEVEL: u8 = 0;
pub const NEUTRAL_LEVEL: u8 = 128;
pub const CREATION_LEVEL: u8 = 255;

fn png_bytes(img: DynamicImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

fn decode_png(bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))
}

pub fn encode_intent(mask: &TernaryIntentMask) -> Result<Vec<u8>> {
    let pixels = mask
        .values()
        .iter()
        .map(|&v| match v {
            -1 => REMOVAL_LEVEL,
            0 => NEUTRAL_LEVEL,
            _ => CREATION_LEVEL,
        })
        .collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, pixels)
        .ok_or_else(|| Error::Wire("intent buffer size mismatch".into()))?;
    png_bytes(DynamicImage::ImageLuma8(img))
}

pub fn decode_intent(bytes: &[u8]) -> Result<TernaryIntentMask> {
    let img = decode_png(bytes)?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Wire(format!(
                "intent mask must be a single-channel 8-bit PNG, got {:?}",
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let mut values = Vec::with_capacity((w * h) as usize);
    for (i, &p) in gray.as_raw().iter().enumerate() {
        let v = match p {
            REMOVAL_LEVEL => -1,
            NEUTRAL_LEVEL => 0,
            CREATION_LEVEL => 1,
            other => {
                return Err(Error::Wire(format!(
                    "illegal intent value {other} at pixel (x={}, y={}); allowed values are 0, 128, 255",
                    i as u32 % w,
                    i as u32 / w
                )))
            }
        };
        values.push(v);
    }
    TernaryIntentMask::new(h as usize, w as usize, values)
}

/// Quantizes a `[0, 1]` image to 8 bits per channel.
pub fn quantize(value: f32) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_rgb(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims();
    if c != 3 {
        return Err(Error::Image(format!("expected a 3-channel image, got {c}")));
    }
    let plane = h * w;
    let mut raw = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            raw.push(quantize(image.data()[ch * plane + i]));
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Image("rgb buffer size mismatch".into()))?;
    png_bytes(DynamicImage::ImageRgb8(img))
}

/// Decodes any PNG to a 3-channel `[0, 1]` tensor.
pub fn decode_rgb(bytes: &[u8]) -> Result<Tensor<f32>> {
    let rgb = decode_png(bytes)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px.0[ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(3, h, w, data)
}

pub fn encode_binary(mask: &BinaryMask) -> Result<Vec<u8>> {
    let pixels = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, pixels)
        .ok_or_else(|| Error::Image("mask buffer size mismatch".into()))?;
    png_bytes(DynamicImage::ImageLuma8(img))
}

pub fn decode_binary(bytes: &[u8]) -> Result<BinaryMask> {
    let gray = decode_png(bytes)?.to_luma8();
    let (w, h) = gray.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for (i, &p) in gray.as_raw().iter().enumerate() {
        data.push(match p {
            0 => false,
            255 => true,
            other => {
                return Err(Error::Image(format!(
                    "binary mask value {other} at pixel (x={}, y={})",
                    i as u32 % w,
                    i as u32 / w
                )))
            }
        });
    }
    BinaryMask::from_vec(h as usize, w as usize, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mapping_table() {
        let m = TernaryIntentMask::new(2, 2, vec![-1, 0, 1, -1]).unwrap();
        let png = encode_intent(&m).unwrap();
        let gray = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(gray.as_raw(), &[0, 128, 255, 0]);
        assert_eq!(decode_intent(&png).unwrap(), m);
    }

    #[test]
    fn all_creation_round_trip() {
        let m = TernaryIntentMask::uniform(5, 7, 1).unwrap();
        let png = encode_intent(&m).unwrap();
        let gray = image::load_from_memory(&png).unwrap().to_luma8();
        assert!(gray.as_raw().iter().all(|&p| p == 255));
        assert_eq!(decode_intent(&png).unwrap(), m);
    }

    #[test]
    fn illegal_value_names_coordinate() {
        let mut raw = vec![128u8; 12];
        raw[4 + 2] = 77; // x=2, y=1
        let png = png_bytes(DynamicImage::ImageLuma8(GrayImage::from_raw(4, 3, raw).unwrap())).unwrap();
        let err = decode_intent(&png).unwrap_err().to_string();
        assert!(err.contains("77") && err.contains("x=2, y=1"), "{err}");
    }

    #[test]
    fn rejects_colour_intent_png() {
        let img = RgbImage::from_raw(1, 1, vec![255, 255, 255]).unwrap();
        let png = png_bytes(DynamicImage::ImageRgb8(img)).unwrap();
        assert!(decode_intent(&png).is_err());
    }

    #[test]
    fn rgb_round_trip_after_quantization() {
        let data: Vec<f32> = (0..48).map(|i| i as f32 / 47.0).collect();
        let img = Tensor::from_vec(3, 4, 4, data).unwrap();
        let back = decode_rgb(&encode_rgb(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(quantize(*a), quantize(*b));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn intent_png_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut x = seed;
            let values: Vec<i8> = (0..h * w).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((x >> 33) % 3) as i8 - 1
            }).collect();
            let m = TernaryIntentMask::new(h, w, values).unwrap();
            let png = encode_intent(&m).unwrap();
            prop_assert_eq!(&decode_intent(&png).unwrap(), &m);
            // encode(decode(png)) reproduces the same pixels
            let again = encode_intent(&decode_intent(&png).unwrap()).unwrap();
            prop_assert_eq!(image::load_from_memory(&again).unwrap().to_luma8().into_raw(),
                            image::load_from_memory(&png).unwrap().to_luma8().into_raw());
        }
    }
}
