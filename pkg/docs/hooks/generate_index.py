import re

README_PATH = './README.md'

# README links point into docs/ from the repository root; the site is rooted at docs/.
DOCS_LINK = re.compile(r'\]\(docs/')


def on_page_read_source(page, config):
    if page.file.src_path != 'index.md':
        return None

    with open(README_PATH, 'r', encoding='utf-8') as f:
        content = f.read()

    content = DOCS_LINK.sub('](', content)
    return '<style> .md-content .md-typeset h1 { display: none; } </style>\n\n' + content
