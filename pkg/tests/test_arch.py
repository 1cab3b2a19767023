import pytest

from app.backend.core.arch import (
    ALEXNET,
    LENET,
    LENET_TINY,
    NAMED_ARCHS,
    VARIANTS,
    LayerKind,
    LayerSpec,
    build_network_spec,
    parse_arch,
    render_arch,
    resolve_arch,
    variant_arch,
)
from app.backend.core.errors import ParseError, ShapeChainError
from app.backend.core.schemas import DclConfig, DclOverrides, Strategy


class TestParse:
    def test_lenet_shape_chain(self):
        spec = parse_arch(LENET, (1, 28, 28), 100)
        kinds = [layer.kind for layer in spec.layers]
        assert kinds == [
            LayerKind.CONV, LayerKind.MAXPOOL, LayerKind.CONV, LayerKind.MAXPOOL,
            LayerKind.FC, LayerKind.DROPOUT, LayerKind.FC, LayerKind.LOSS,
        ]
        assert spec.in_shape(4) == (50, 4, 4)
        assert spec.out_shape(6) == (100, 1, 1)

    def test_out_alone_on_vector_input(self):
        spec = parse_arch("OUT", (8,), 10)
        assert [layer.kind for layer in spec.layers] == [LayerKind.FC, LayerKind.LOSS]
        assert spec.layers[0].filters == 10
        assert spec.input_shape == (8, 1, 1)

    def test_malformed_token_position(self):
        with pytest.raises(ParseError) as err:
            parse_arch("C5@20-XX")
        assert err.value.position == 2

    def test_zero_kernel_is_parse_error(self):
        with pytest.raises(ParseError) as err:
            parse_arch("C0@20-OUT")
        assert err.value.position == 1

    def test_dropout_ratio_range(self):
        with pytest.raises(ParseError):
            parse_arch("FC10-D1.5-OUT", (4,), 3)

    def test_out_must_be_last(self):
        with pytest.raises(ParseError):
            parse_arch("OUT-FC10", (4,), 3)

    def test_alexnet_geometry(self):
        spec = parse_arch(ALEXNET, (3, 227, 227), 1000)
        fc6 = next(i for i, layer in enumerate(spec.layers) if layer.kind is LayerKind.FC)
        assert spec.in_shape(fc6) == (256, 6, 6)
        assert spec.layers[2].stride == 1 and spec.layers[2].pad == 2

    def test_trailing_fc_closes_network(self):
        spec = parse_arch("FC16-FC5", (4,), 5)
        assert spec.layers[-2].relu is False
        assert spec.layers[0].relu is True

    def test_class_mismatch(self):
        with pytest.raises(ShapeChainError):
            parse_arch("FC16-FC5", (4,), 7)

    def test_non_integral_conv_is_chain_error(self):
        with pytest.raises(ShapeChainError) as err:
            parse_arch("C3(S2)@4-OUT", (1, 8, 8), 10)
        assert err.value.layer == 0


class TestDclTokens:
    def test_defaults(self):
        spec = parse_arch("FC500-DCL2@100-OUT", (800,), 10)
        cfg = spec.layers[1].dcl
        assert cfg.T == 2 and cfg.M == (100, 100) and cfg.K2 == 500
        assert cfg.strategy is Strategy.DETERMINISTIC
        assert spec.out_shape(1) == (500, 1, 1)

    def test_stochastic_three_branches(self):
        cfg = parse_arch("DCL3S@4/16-OUT", (8,), 10).layers[0].dcl
        assert cfg.strategy is Strategy.STOCHASTIC and cfg.K2 == 16

    def test_stochastic_needs_three_branches(self):
        with pytest.raises(ParseError):
            parse_arch("DCL2S@4/16-OUT", (8,), 10)

    def test_full_extent_kernel(self):
        spec = parse_arch(variant_arch("DCL-A2", 100), (1, 28, 28), 100)
        block = spec.layers[4]
        assert block.kind is LayerKind.DCL and block.kernel == 4
        assert spec.out_shape(4) == (500, 1, 1)

    def test_overrides(self):
        spec = parse_arch("DCL2@3/10-OUT", (4,), 10, DclOverrides(M=(3, 5)))
        assert spec.layers[0].dcl.M == (3, 5)

    def test_wrong_branch_count(self):
        with pytest.raises(ParseError):
            parse_arch("DCL2@3/10-OUT", (4,), 10, DclOverrides(M=(1, 2, 3)))

    def test_epsilon_is_decimal(self):
        assert DclConfig.uniform(2, 1, 10).epsilon == 0.01
        assert DclConfig.uniform(3, 1, 10).epsilon == 0.001


class TestRender:
    @pytest.mark.parametrize("text", [LENET, LENET_TINY, ALEXNET, "C5(S1P2)@8-MP3S2-FC16-DCL3S@4/20-OUT"])
    def test_round_trip(self, text):
        shape = (3, 227, 227) if text == ALEXNET else (1, 28, 28)
        classes = 1000 if text == ALEXNET else 100
        spec = parse_arch(text, shape, classes)
        assert parse_arch(render_arch(spec), shape, classes) == spec

    def test_canonical_forms(self):
        spec = parse_arch("C5(P2)@4-MP2-FC16-D0.5-DCL2@2-OUT", (1, 28, 28), 10)
        assert render_arch(spec) == "C5(P2)@4-MP2S2-FC16-D0.5-DCL2@2/10-OUT"

    def test_unequal_widths_have_no_token(self):
        spec = parse_arch("DCL2@3/10-OUT", (4,), 10, DclOverrides(M=(3, 5)))
        with pytest.raises(ValueError):
            render_arch(spec)


class TestProgrammatic:
    def test_loss_must_be_last(self):
        layers = [LayerSpec(LayerKind.LOSS), LayerSpec(LayerKind.FC, filters=3)]
        with pytest.raises(ShapeChainError):
            build_network_spec(layers, (4,), 3)

    def test_relu_layer(self):
        layers = [LayerSpec(LayerKind.FC, filters=6), LayerSpec(LayerKind.RELU),
                  LayerSpec(LayerKind.FC, filters=3), LayerSpec(LayerKind.LOSS)]
        spec = build_network_spec(layers, (4,), 3)
        assert spec.out_shape(1) == (6, 1, 1)


class TestVariants:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_variants_parse(self, variant):
        parse_arch(variant_arch(variant, 100), (1, 28, 28), 100)

    def test_a_branch_width_is_a_fifth(self):
        assert variant_arch("DCL-A2", 100) == "C5@20-MP2S2-C5@50-MP2S2-DCL2@100/500-D0.5-OUT"
        assert variant_arch("DCL-B3S", 100).endswith("FC500-D0.5-DCL3S@20/100")

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            variant_arch("DCL-C2", 100)

    def test_resolve(self):
        assert resolve_arch("alexnet", 1000) == NAMED_ARCHS["alexnet"]
        text, shape = resolve_arch("DCL-A2-tiny", 10)
        assert shape is None and text.startswith("C5@4-")
        assert resolve_arch("FC10-OUT", 10) == ("FC10-OUT", None)
