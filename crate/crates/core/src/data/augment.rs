use image::GrayImage;

use crate::data::types::{Orientation, SliceImage, TumorClass};
use crate::error::{Error, Result};

/// Default augmentation angles in degrees: ±5, ±10, ±15, ±20, ±25.
pub const DEFAULT_ANGLES: [f64; 10] = [
    -25.0, -20.0, -15.0, -10.0, -5.0, 5.0, 10.0, 15.0, 20.0, 25.0,
];

/// The (orientation, class) cell that receives rotation augmentation by default.
pub const DEFAULT_AUGMENTED_CELL: (Orientation, TumorClass) =
    (Orientation::Sagittal, TumorClass::Glioma);

/// Rotates every slice by every angle. Output is slice-major: all angles of the
/// first slice, then the next slice.
pub fn augment_rotations(slices: &[SliceImage], angles: &[f64]) -> Result<Vec<SliceImage>> {
    if angles.is_empty() {
        return Err(Error::InvalidInput("empty rotation angle list".into()));
    }
    if let Some(bad) = angles.iter().find(|a| !(**a > -180.0 && **a <= 180.0)) {
        return Err(Error::InvalidInput(format!(
            "rotation angle {bad} outside (-180, 180]"
        )));
    }
    let mut out = Vec::with_capacity(slices.len() * angles.len());
    for slice in slices {
        for &angle in angles {
            out.push(SliceImage {
                id: rotated_id(&slice.id, angle),
                pixels: rotate_bilinear(&slice.pixels, angle),
                domain: slice.domain,
                class_label: slice.class_label,
                orientation_label: slice.orientation_label,
            });
        }
    }
    Ok(out)
}

pub fn rotated_id(parent: &str, angle: f64) -> String {
    format!("{parent}_rot{angle}")
}

/// Counter-clockwise rotation about the image center with zero fill outside
/// the source frame.
pub fn rotate_bilinear(img: &GrayImage, angle_deg: f64) -> GrayImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let theta = angle_deg.to_radians();
    let (sin, cos) = snap_trig(theta);
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // Inverse map (image y axis points down).
            let sx = snap(cos * dx - sin * dy + cx);
            let sy = snap(sin * dx + cos * dy + cy);
            let v = sample_bilinear(img, sx, sy);
            out.put_pixel(x, y, image::Luma([v.round().clamp(0.0, 255.0) as u8]));
        }
    }
    out
}

/// Bilinear sample with zero outside the frame.
pub(crate) fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            img.get_pixel(xi as u32, yi as u32)[0] as f64
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn snap_trig(theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (snap_unit(s), snap_unit(c))
}

fn snap_unit(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < 1e-12 {
            return target;
        }
    }
    v
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::Domain;
    use image::Luma;

    fn slice(id: &str, img: GrayImage) -> SliceImage {
        SliceImage::new(
            id,
            img,
            Domain::Source,
            Some(TumorClass::Glioma),
            Some(Orientation::Sagittal),
        )
        .unwrap()
    }

    fn blob(size: u32) -> GrayImage {
        GrayImage::from_fn(size, size, |x, y| {
            let (dx, dy) = (x as f64 - 20.0, y as f64 - 26.0);
            if (dx * dx) / 100.0 + (dy * dy) / 36.0 <= 1.0 {
                Luma([200])
            } else {
                Luma([0])
            }
        })
    }

    #[test]
    fn zero_angle_is_identity() {
        let img = GrayImage::from_fn(40, 36, |x, y| Luma([((x * 7 + y * 13) % 256) as u8]));
        let out = augment_rotations(&[slice("a", img.clone())], &[0.0]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].pixels, img);
    }

    #[test]
    fn center_pixel_is_fixed_under_quarter_turn() {
        let mut img = GrayImage::new(33, 33);
        img.put_pixel(16, 16, Luma([255]));
        let out = rotate_bilinear(&img, 90.0);
        assert_eq!(out.get_pixel(16, 16)[0], 255);
        assert_eq!(out.pixels().filter(|p| p[0] != 0).count(), 1);
    }

    #[test]
    fn sixty_eight_by_ten() {
        let slices: Vec<_> = (0..68)
            .map(|i| slice(&format!("g{i}"), GrayImage::new(32, 32)))
            .collect();
        let out = augment_rotations(&slices, &DEFAULT_ANGLES).unwrap();
        assert_eq!(out.len(), 680);
        assert_eq!(out[0].id, "g0_rot-25");
        assert!(out.iter().all(|s| s.class_label == Some(TumorClass::Glioma)
            && s.orientation_label == Some(Orientation::Sagittal)
            && s.width() == 32));
        let ids: std::collections::HashSet<_> = out.iter().map(|s| &s.id).collect();
        assert_eq!(ids.len(), 680);
    }

    #[test]
    fn rejects_bad_angles() {
        let s = [slice("a", GrayImage::new(32, 32))];
        assert!(augment_rotations(&s, &[]).is_err());
        assert!(augment_rotations(&s, &[-180.0]).is_err());
        assert!(augment_rotations(&s, &[180.0]).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_keeps_foreground_close(angle in -45.0f64..45.0) {
            let img = blob(48);
            let back = rotate_bilinear(&rotate_bilinear(&img, angle), -angle);
            let (w, h) = img.dimensions();
            let mut fg = 0usize;
            let mut kept = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if img.get_pixel(x, y)[0] <= 35 { continue; }
                    fg += 1;
                    let near = (-1i64..=1).any(|dy| (-1i64..=1).any(|dx| {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64
                            && back.get_pixel(nx as u32, ny as u32)[0] > 35
                    }));
                    if near { kept += 1; }
                }
            }
            proptest::prop_assert!(kept as f64 >= 0.9 * fg as f64, "{kept}/{fg}");
        }
    }
}
