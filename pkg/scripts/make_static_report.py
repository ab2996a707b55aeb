import base64, html as _html, json, pathlib, sys

from lorun.fileio import read_rows

run = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "runs/toy_cs")


def enc(p):
    p = pathlib.Path(p)
    if not p.exists(): return ""
    return base64.b64encode(p.read_bytes()).decode()


def table(rows, cols):
    head = "".join(f"<th>{c}</th>" for c in cols)
    body = "".join("<tr>" + "".join(f"<td>{_html.escape(str(r.get(c, '')))}</td>" for c in cols) + "</tr>" for r in rows)
    return f"<table><tr>{head}</tr>{body}</table>"


curves = enc(run / "curves.png")

checks = []
vfile = run / "verify.jsonl"
if vfile.exists():
    checks = [json.loads(l) for l in vfile.read_text().splitlines() if l.strip()]
failed = [c for c in checks if not c["passed"]]

evals = []
for p in sorted(run.glob("*eval.csv")):
    for r in read_rows(p):
        if r.get("id") == "mean":
            evals.append({"table": p.name, **r})

pfile = run / "params.csv"
params = pfile.read_text().split("\n\n")[0].strip() if pfile.exists() else ""

heat = sorted((run / "heatmaps").glob("*.png"))[:12] if (run / "heatmaps").exists() else []

html = f"""<!doctype html><meta charset="utf-8">
<style>body{{font-family:sans-serif;max-width:960px;margin:2rem auto;}} img{{max-width:100%;}} table{{border-collapse:collapse;width:100%;}} td,th{{border:1px solid #ddd;padding:6px;}}</style>
<h1>lorun run report: {_html.escape(run.name)}</h1>
<h2>Summary</h2>
<ul>
  <li>Invariant checks: {len(checks) - len(failed)}/{len(checks)} passed{(' (failed: ' + ', '.join(c['check'] for c in failed) + ')') if failed else ''}</li>
</ul>
<h2>Parameters</h2><pre>{_html.escape(params) or '(no params.csv)'}</pre>
<h2>Loss curves</h2>{('<img src="data:image/png;base64,'+curves+'"/>') if curves else '<p>(no curves plot)</p>'}
<h2>Evaluation (means)</h2>
{table(evals, ["table", "psnr", "ssim", "baseline_psnr", "baseline_ssim"]) if evals else '<p>(no eval tables)</p>'}
<h2>Adapter deltas</h2>
{"".join(f'<figure><img src="data:image/png;base64,{enc(p)}"/><figcaption>{p.stem}</figcaption></figure>' for p in heat) or '<p>(no heatmap PNGs; run lora inspect --png)</p>'}
"""
(run / "index.html").write_text(html, encoding="utf-8")
print(f"Wrote {run / 'index.html'}")
