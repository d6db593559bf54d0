//! Desk-scale unsupervised domain adaptation for 2D semantic segmentation.
//!
//! The crate trains a small hierarchical-attention segmentation network on a
//! labeled source domain and adapts it to an unlabeled target domain through
//! mean-teacher self-training. Four feature-space mechanisms drive the
//! adaptation:
//!
//! - input-space style transfer (Fourier amplitude swapping or histogram
//!   matching) in [`style`],
//! - entropy-filtered pseudo-labels and EMA teacher updates in [`teacher`],
//! - class-prototype alignment in [`proto`],
//! - global/local contrastive learning with a momentum negative queue in
//!   [`contrast`],
//! - attention-guided auxiliary local prediction in [`aalp`].
//!
//! [`data`] owns the on-disk dataset format and a synthetic two-domain
//! generator, [`net`] the segmentation network, [`train`] the orchestration
//! loop and metrics, and [`cli`] the command-line surface.
//!
//! The full walkthrough lives in the `book/` directory (`mdbook serve book`);
//! its code snippets double as doc-tests (see the bottom of this file).

pub mod aalp;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod contrast;
pub mod data;
pub mod net;
pub mod proto;
pub mod report;
pub mod style;
pub mod teacher;
pub mod train;

// Book chapters compile and run as doc-tests so the guide can never drift
// from the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub mod $name {}
        };
    }

    chapter!(data_and_domains, "../../../book/src/data-and-domains.md");
    chapter!(style_transfer, "../../../book/src/style-transfer.md");
    chapter!(network, "../../../book/src/network.md");
    chapter!(mean_teacher, "../../../book/src/mean-teacher.md");
    chapter!(prototype_alignment, "../../../book/src/prototype-alignment.md");
    chapter!(contrastive, "../../../book/src/contrastive.md");
    chapter!(attention_patches, "../../../book/src/attention-patches.md");
    chapter!(training, "../../../book/src/training.md");
}
