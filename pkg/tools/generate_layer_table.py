"""从模型定义自动更新文档中的层编号表

用法:
    python tools/generate_layer_table.py

流程:
    1. 用 build_vgg11_like / describe_layers 生成各宽度系数下的层编号表
    2. 渲染为 markdown 表格
    3. 更新 docs/guides/model.md 的 AUTO 区

只覆写 <!-- AUTO: 层编号表 -->...<!-- /AUTO --> 之间的内容，手写部分不动。
"""

import re
from pathlib import Path

from splitstream.core.model import build_vgg11_like, describe_layers

MODEL_DOC = Path(__file__).resolve().parent.parent / "docs" / "guides" / "model.md"

# 文档中展示的宽度系数与类别数
WIDTH_SCALES = (1.0, 0.5)
NUM_CLASSES = 10

AUTO_BEGIN = "<!-- AUTO: 层编号表 -->"
AUTO_END = "<!-- /AUTO -->"


def format_shape(shape) -> str:
    return "×".join(str(d) for d in shape)


def render_table(width_scale: float) -> str:
    """渲染一个宽度系数下的层编号表"""
    table = describe_layers(build_vgg11_like(NUM_CLASSES, width_scale))
    lines = [
        f"#### width_scale = {width_scale:g}",
        "",
        "| n | 层 | l_n 形状 | φ̃ |",
        "|---|---|---|---|",
    ]
    for row in table.itertuples(index=False):
        shape = tuple(row.output_shape)
        lines.append(f"| {row.index} | {row.kinds} | {format_shape(shape)} | {shape[0]} |")
    return "\n".join(lines)


def build_auto_block() -> str:
    parts = [AUTO_BEGIN, ""]
    for scale in WIDTH_SCALES:
        parts.append(render_table(scale))
        parts.append("")
    parts.append(AUTO_END)
    return "\n".join(parts)


def update_doc(doc_path: Path, new_auto_block: str) -> bool:
    """替换文档中的 AUTO 区；没有 AUTO 区时追加到末尾。返回内容是否变化"""
    with open(doc_path, "r", encoding="utf-8") as f:
        content = f.read()

    pattern = re.escape(AUTO_BEGIN) + r".*?" + re.escape(AUTO_END)
    if re.search(pattern, content, re.DOTALL):
        updated = re.sub(pattern, lambda _: new_auto_block, content, count=1, flags=re.DOTALL)
    else:
        updated = content.rstrip("\n") + "\n\n" + new_auto_block + "\n"

    if updated == content:
        return False
    with open(doc_path, "w", encoding="utf-8") as f:
        f.write(updated)
    return True


def main():
    if not MODEL_DOC.exists():
        print(f"❌ 文档不存在: {MODEL_DOC}")
        return
    changed = update_doc(MODEL_DOC, build_auto_block())
    print(f"{'✅ 已更新' if changed else '⏭️  无变化'}: {MODEL_DOC.relative_to(MODEL_DOC.parents[2])}")


if __name__ == "__main__":
    main()
