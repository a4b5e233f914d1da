use crate::numerics::AttentionMask;

/// Image block first, then text. Image tokens see each other bidirectionally
/// and never see text; text token `i` sees every image token and text tokens
/// `0..=i`.
pub fn build_generation_mask(n_img: usize, n_txt: usize) -> AttentionMask {
    AttentionMask::from_fn(n_img + n_txt, |i, j| match (i < n_img, j < n_img) {
        (true, true) => true,
        (true, false) => false,
        (false, true) => true,
        (false, false) => j <= i,
    })
}
