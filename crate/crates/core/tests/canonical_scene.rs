//! The canonical fixture's masks, pinned so scene or camera edits show up.

use distill_lab::render::{DEFAULT_FAR, DEFAULT_NEAR};
use distill_lab::scene::{canonical_setup, mask_for_camera};

/// Masked pixels per 128x128 view, recorded from the committed fixture.
const MASKED_PIXELS: [usize; 20] = [
    1706, 1775, 1779, 1684, 1505, 1419, 1498, 1581, 1617, 1576, 1530, 1608, 1820, 1931, 1901, 1839, 1922, 2055, 2018, 1815,
];

/// Per-view masked fraction band.
const BAND: (f64, f64) = (0.085, 0.13);

#[test]
fn canonical_masks_match_the_recorded_counts() {
    let setup = canonical_setup();
    let cams = setup.cameras.cameras().unwrap();
    assert_eq!(cams.len(), MASKED_PIXELS.len());
    for (i, (cam, &want)) in cams.iter().zip(&MASKED_PIXELS).enumerate() {
        assert_eq!((cam.width, cam.height), (128, 128));
        let mask = mask_for_camera(cam, &setup.mask_box, DEFAULT_NEAR, DEFAULT_FAR);
        assert_eq!(mask.count(), want, "view {i}");
        let f = mask.fraction();
        assert!(f > BAND.0 && f < BAND.1, "view {i}: fraction {f}");
    }
}

#[test]
fn every_view_sees_unmasked_context() {
    let setup = canonical_setup();
    for cam in setup.cameras.cameras().unwrap() {
        let mask = mask_for_camera(&cam, &setup.mask_box, DEFAULT_NEAR, DEFAULT_FAR);
        assert!(mask.count() > 0 && mask.count() < mask.width() * mask.height() / 2);
    }
}
