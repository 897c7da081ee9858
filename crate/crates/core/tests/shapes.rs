//! Embedding grid and mask sizes across image resolutions.

use zeus_core::decoder::decode_mask;
use zeus_core::encoders::EncoderSet;
use zeus_core::fusion::FusionMode;
use zeus_core::model::{InstructionWiring, ZeusConfig, ZeusModel};
use zeus_core::{DimConfig, Tensor};

#[test]
fn grid_is_image_over_sixteen_and_mask_is_four_grids() {
    for img in [64, 128, 256] {
        let dims = DimConfig::for_image(img, 16);
        assert_eq!(dims.grid(), img / 16);
        assert_eq!(dims.mask_size, 4 * dims.grid());
        let enc = EncoderSet::new(&dims, 3).unwrap();
        let image = Tensor::from_fn(&[img, img], |i| ((i * 7) % 13) as f64 / 13.0);
        let emb = enc.image.encode(&image).unwrap();
        assert_eq!(emb.shape(), &[dims.embed_dim, img / 16, img / 16]);
        let model = ZeusModel::new(ZeusConfig {
            dims,
            fusion: FusionMode::Late,
            modalities: 1,
            wiring: InstructionWiring::Text,
            share_weights: true,
            seed: 0,
        })
        .unwrap();
        let head = &model.heads[0];
        let prompt = Tensor::zeros(&[1, dims.prompt_dim]);
        let mask = decode_mask(&head.decoder, &model.store, &emb, &prompt).unwrap();
        assert_eq!(mask.shape(), &[4 * img / 16, 4 * img / 16]);
    }
}
